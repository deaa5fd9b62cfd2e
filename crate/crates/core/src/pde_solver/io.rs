//! Binary container and CSV slices for [`SolutionGrid`].
//!
//! Container layout (little endian): 8-byte magic, `u32` version, `u64`
//! header length, JSON header, then the values `(n_t+1, nodes, I+1)` and
//! the gradients `(n_t+1, nodes, I+1, d)` as `f64`.

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use super::{Lattice, SolutionGrid, SolveMeta};
use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 8] = b"RADNERSG";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tool_version: String,
    shape: [usize; 4],
    meta: SolveMeta,
}

pub fn write_container(sol: &SolutionGrid, path: &Path) -> Result<()> {
    let sh = sol.gradients.shape();
    let header = Header {
        tool_version: crate::VERSION.to_string(),
        shape: [sh[0], sh[1], sh[2], sh[3]],
        meta: sol.meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(20 + json.len() + 8 * (sol.values.len() + sol.gradients.len()));
    buf.extend_from_slice(CONTAINER_MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in sol.values.iter().chain(sol.gradients.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<SolutionGrid> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if buf.len() < 20 || &buf[..8] != CONTAINER_MAGIC {
        return Err(bad("not a solution container"));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(bad(&format!("unsupported container version {version}")));
    }
    let hlen = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
    let body = 20usize.checked_add(hlen).filter(|e| *e <= buf.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&buf[20..body])?;
    let [nt, nn, k, d] = header.shape;
    let nv = nt * nn * k;
    let ng = nv * d;
    if buf.len() != body + 8 * (nv + ng) {
        return Err(bad("payload size does not match the header"));
    }
    if header.meta.grid.n_nodes() != nn || header.meta.grid.t_steps + 1 != nt || header.meta.grid.dim() != d {
        return Err(bad("header shape disagrees with the grid"));
    }
    let floats: Vec<f64> = buf[body..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let values = Array3::from_shape_vec((nt, nn, k), floats[..nv].to_vec()).map_err(|e| bad(&e.to_string()))?;
    let gradients = Array4::from_shape_vec((nt, nn, k, d), floats[nv..].to_vec()).map_err(|e| bad(&e.to_string()))?;
    Ok(SolutionGrid {
        values,
        gradients,
        meta: header.meta,
    })
}

/// One CSV row per node at slice `n`: `t, x…, a, Y…, d<comp>_dx<a>…`.
pub fn write_csv_slice(sol: &SolutionGrid, n: usize, path: &Path) -> Result<()> {
    let lat: Lattice = sol.lattice();
    let (d, k) = (lat.dim, sol.components());
    let mut cols = vec!["t".to_string()];
    cols.extend((0..d).map(|a| format!("x{a}")));
    cols.push("a".into());
    cols.extend((1..k).map(|i| format!("Y{i}")));
    for j in 0..k {
        let name = if j == 0 { "a".to_string() } else { format!("Y{j}") };
        cols.extend((0..d).map(|a| format!("d{name}_dx{a}")));
    }
    let mut out = cols.join(",");
    out.push('\n');
    let t = sol.time(n);
    let mut x = [0.0; 2];
    for node in 0..lat.n_nodes() {
        lat.coords(node, &mut x);
        let mut row = vec![format!("{t:.16e}")];
        row.extend(x[..d].iter().map(|v| format!("{v:.16e}")));
        row.extend((0..k).map(|j| format!("{:.16e}", sol.values[[n, node, j]])));
        for j in 0..k {
            row.extend((0..d).map(|a| format!("{:.16e}", sol.gradients[[n, node, j, a]])));
        }
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
