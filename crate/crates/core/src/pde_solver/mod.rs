//! Backward lattice solver for `u_t + 𝒜u + F(t, x, u, Du) = 0`, `u(T,·) = g`,
//! with `F(t,x,y,p) = −f(t, x, y, p·Σ)`.
//!
//! Each step treats the generator implicitly (frozen coefficients, one
//! tridiagonal solve per line, locally one-dimensional splitting in 2-D)
//! and the nonlinearity explicitly at the previous slice. Boundary nodes
//! carry a zero second derivative (linear extrapolation).

mod io;
mod lattice;

pub use io::{read_container, write_container, write_csv_slice, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use lattice::{CellLocation, GridSpec, Lattice};

use ndarray::{s, Array2, Array3, Array4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::drivers::{Driver, DriverKind, PointData};
use crate::error::{Error, Result};
use crate::linalg::{self, solve_tridiagonal};
use crate::model::{endowment_decomposition, Economy, StateDynamics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeParams {
    /// Re-evaluate the nonlinearity at the current slice.
    pub inner_picard: bool,
    pub inner_iterations: usize,
    pub inner_tol: f64,
    /// Any `|u|` above this aborts the solve.
    pub blowup: f64,
}

impl Default for SchemeParams {
    fn default() -> Self {
        SchemeParams {
            inner_picard: false,
            inner_iterations: 5,
            inner_tol: 1e-10,
            blowup: 1e6,
        }
    }
}

impl SchemeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.blowup > 0.0) || !(self.inner_tol > 0.0) {
            return Err(Error::InvalidInput("scheme tolerances must be positive".into()));
        }
        if self.inner_picard && self.inner_iterations == 0 {
            return Err(Error::InvalidInput("inner Picard needs at least one iteration".into()));
        }
        Ok(())
    }
}

/// Run statistics recorded with a solution.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    /// Driver evaluations where `exp(-a)` had to be clamped.
    pub clamped_evaluations: u64,
    /// Largest inner-iteration count used in a step (0 when disabled).
    pub max_inner_iterations: usize,
    /// Last inner-iteration update size seen.
    pub last_inner_change: f64,
    /// Explicit-step threshold estimated from the solution.
    pub stability_dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveMeta {
    pub grid: GridSpec,
    pub horizon: f64,
    pub components: usize,
    pub driver: DriverKind,
    pub scheme: SchemeParams,
    pub fingerprint: String,
    pub stats: SolveStats,
}

/// Values `u[n, node, j]` and gradients `Du[n, node, j, a]`; component 0
/// is `a`, components `1..=I` are `Y^i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionGrid {
    pub values: Array3<f64>,
    pub gradients: Array4<f64>,
    pub meta: SolveMeta,
}

impl SolutionGrid {
    pub fn lattice(&self) -> Lattice {
        Lattice::new(&self.meta.grid)
    }

    pub fn dim(&self) -> usize {
        self.meta.grid.dim()
    }

    pub fn t_steps(&self) -> usize {
        self.meta.grid.t_steps
    }

    pub fn dt(&self) -> f64 {
        self.meta.grid.dt(self.meta.horizon)
    }

    pub fn time(&self, n: usize) -> f64 {
        if n == self.t_steps() {
            self.meta.horizon
        } else {
            n as f64 * self.dt()
        }
    }

    pub fn components(&self) -> usize {
        self.meta.components
    }

    pub fn n_nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn value(&self, n: usize, node: usize, comp: usize) -> f64 {
        self.values[[n, node, comp]]
    }

    /// Slice index closest to `t`.
    pub fn nearest_slice(&self, t: f64) -> usize {
        ((t / self.dt()).round().max(0.0) as usize).min(self.t_steps())
    }

    /// Values interpolated linearly in time and multilinearly in space.
    pub fn interpolate(&self, t: f64, x: &[f64], out: &mut [f64]) -> bool {
        let lat = self.lattice();
        let loc = lat.locate(x);
        let (n, w) = self.time_cell(t);
        let j = self.components();
        let lo = self.values.index_axis(Axis(0), n);
        let hi = self.values.index_axis(Axis(0), n + 1);
        let (lo, hi) = (lo.as_slice().unwrap(), hi.as_slice().unwrap());
        for (c, o) in out.iter_mut().enumerate().take(j) {
            *o = (1.0 - w) * lat.interpolate(lo, j, c, &loc) + w * lat.interpolate(hi, j, c, &loc);
        }
        loc.outside
    }

    /// Lower slice index and weight for linear interpolation in time.
    pub fn time_cell(&self, t: f64) -> (usize, f64) {
        let s = (t / self.dt()).clamp(0.0, self.t_steps() as f64);
        let n = (s.floor() as usize).min(self.t_steps() - 1);
        (n, s - n as f64)
    }

    /// Fails if any entry is non-finite.
    pub fn check_finite(&self) -> Result<()> {
        if self.values.iter().chain(self.gradients.iter()).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Scheme("solution contains non-finite entries".into()))
        }
    }
}

/// SHA-256 over the model, lattice and scheme description.
pub fn model_fingerprint(
    econ: &Economy,
    dyn_: &StateDynamics,
    driver: &DriverKind,
    grid: &GridSpec,
    scheme: &SchemeParams,
) -> String {
    let mut h = Sha256::new();
    h.update(econ.describe().as_bytes());
    h.update(b"|");
    h.update(dyn_.describe().as_bytes());
    h.update(b"|");
    h.update(driver.label().as_bytes());
    h.update(b"|");
    h.update(serde_json::to_string(grid).unwrap_or_default().as_bytes());
    h.update(serde_json::to_string(scheme).unwrap_or_default().as_bytes());
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Frozen coefficients of `I − Δt·L` at one time slice.
struct StepCoefficients {
    /// `Δt·½(ΣΣᵀ)_aa / h_a²` per node and dimension.
    diff: Vec<[f64; 2]>,
    /// `Δt·Λ_a / (2h_a)`.
    adv: Vec<[f64; 2]>,
    /// `Δt·(ΣΣᵀ)_01` (2-D only).
    mixed: Vec<f64>,
}

fn step_coefficients(lat: &Lattice, dyn_: &StateDynamics, t: f64, dt: f64) -> StepCoefficients {
    let d = lat.dim;
    let nn = lat.n_nodes();
    let mut diff = vec![[0.0; 2]; nn];
    let mut adv = vec![[0.0; 2]; nn];
    let mut mixed = vec![0.0; nn];
    let mut x = [0.0; 2];
    let mut lam = [0.0; 2];
    let mut sig = [0.0; 4];
    for node in 0..nn {
        lat.coords(node, &mut x);
        dyn_.drift_at(t, &x[..d], &mut lam[..d]);
        dyn_.diffusion_at(t, &x[..d], &mut sig[..d * d]);
        for a in 0..d {
            let saa: f64 = (0..d).map(|k| sig[a * d + k] * sig[a * d + k]).sum();
            diff[node][a] = dt * 0.5 * saa / (lat.h[a] * lat.h[a]);
            adv[node][a] = dt * lam[a] / (2.0 * lat.h[a]);
        }
        if d == 2 {
            mixed[node] = dt * (sig[0] * sig[2] + sig[1] * sig[3]);
        }
    }
    StepCoefficients { diff, adv, mixed }
}

/// Tridiagonal system of one line: interior rows, with the boundary values
/// eliminated through `u₀ = 2u₁ − u₂` and its mirror image.
fn line_system(c: &[f64], b: &[f64], lower: &mut [f64], diag: &mut [f64], upper: &mut [f64]) {
    let n = c.len();
    let m = n - 2;
    for k in 0..m {
        let p = k + 1;
        lower[k] = -(c[p] - b[p]);
        diag[k] = 1.0 + 2.0 * c[p];
        upper[k] = -(c[p] + b[p]);
    }
    diag[0] = 1.0 + 2.0 * b[1];
    upper[0] = -2.0 * b[1];
    let p = n - 2;
    lower[m - 1] = 2.0 * b[p];
    diag[m - 1] = 1.0 - 2.0 * b[p];
}

fn solve_line(vals: &mut [f64], c: &[f64], b: &[f64]) -> std::result::Result<(), usize> {
    let n = vals.len();
    let m = n - 2;
    let mut lower = vec![0.0; m];
    let mut diag = vec![0.0; m];
    let mut upper = vec![0.0; m];
    let mut scratch = vec![0.0; m];
    line_system(c, b, &mut lower, &mut diag, &mut upper);
    solve_tridiagonal(&lower, &diag, &upper, &mut vals[1..n - 1], &mut scratch).map_err(|k| k + 1)?;
    vals[0] = 2.0 * vals[1] - vals[2];
    vals[n - 1] = 2.0 * vals[n - 2] - vals[n - 3];
    Ok(())
}

/// Applies `I − Δt·L_a` along one line (interior rows) and the
/// extrapolation residual on the two boundary nodes.
fn apply_line(vals: &[f64], c: &[f64], b: &[f64], out: &mut [f64]) {
    let n = vals.len();
    for p in 1..n - 1 {
        out[p] = -(c[p] - b[p]) * vals[p - 1] + (1.0 + 2.0 * c[p]) * vals[p] - (c[p] + b[p]) * vals[p + 1];
    }
    out[0] = vals[0] - 2.0 * vals[1] + vals[2];
    out[n - 1] = vals[n - 1] - 2.0 * vals[n - 2] + vals[n - 3];
}

/// Solves `(I − Δt·L_a) v = rhs` along every line of dimension `a`, in place.
fn sweep(lat: &Lattice, coef: &StepCoefficients, a: usize, k: usize, field: &mut [f64]) -> Result<()> {
    let na = lat.n[a];
    let stride = lat.stride(a);
    let other = lat.n_nodes() / na;
    let start = |o: usize| if a == 0 { o * lat.n[0] } else { o };
    let lines: Vec<(usize, usize)> = (0..other).flat_map(|o| (0..k).map(move |e| (o, e))).collect();
    let solved: Vec<std::result::Result<Vec<f64>, (usize, usize)>> = lines
        .par_iter()
        .map(|&(o, e)| {
            let base = start(o);
            let mut vals: Vec<f64> = (0..na).map(|p| field[(base + p * stride) * k + e]).collect();
            let c: Vec<f64> = (0..na).map(|p| coef.diff[base + p * stride][a]).collect();
            let b: Vec<f64> = (0..na).map(|p| coef.adv[base + p * stride][a]).collect();
            solve_line(&mut vals, &c, &b).map_err(|p| (base + p * stride, e))?;
            Ok(vals)
        })
        .collect();
    for (&(o, e), res) in lines.iter().zip(solved) {
        let vals = res.map_err(|(node, comp)| {
            Error::Scheme(format!(
                "implicit operator is singular at node {node} (component {comp})"
            ))
        })?;
        let base = start(o);
        for (p, v) in vals.into_iter().enumerate() {
            field[(base + p * stride) * k + e] = v;
        }
    }
    Ok(())
}

/// Time-marching engine shared by the nonlinear and linear solves.
pub(crate) struct Marcher<'a> {
    pub lat: Lattice,
    pub dyn_: &'a StateDynamics,
    pub horizon: f64,
    pub n_t: usize,
    pub k: usize,
}

/// Source term `S` such that `(I − ΔtL)uⁿ = u^{n+1} + Δt·S`. Arguments:
/// slice index of evaluation, time, node coordinates, values, gradients,
/// output. Returns whether a clamp was needed.
pub(crate) trait Source: Sync {
    fn eval(&self, slice: usize, t: f64, x: &[f64], u: &[f64], du: &[f64], out: &mut [f64]) -> Result<bool>;
}

impl<'a> Marcher<'a> {
    fn dt(&self) -> f64 {
        self.horizon / self.n_t as f64
    }

    fn time(&self, n: usize) -> f64 {
        if n == self.n_t {
            self.horizon
        } else {
            n as f64 * self.dt()
        }
    }

    fn gradient(&self, u: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; u.len() * self.lat.dim];
        self.lat.gradient(u, self.k, &mut g);
        g
    }

    fn source_rhs<S: Source>(
        &self,
        src: &S,
        slice: usize,
        base: &[f64],
        u: &[f64],
        du: &[f64],
        clamps: &AtomicU64,
    ) -> Result<Vec<f64>> {
        let (k, d, dt) = (self.k, self.lat.dim, self.dt());
        let t = self.time(slice);
        let mut rhs = base.to_vec();
        let chunk = (2048 / k.max(1)).max(1) * k;
        rhs.par_chunks_mut(chunk).enumerate().try_for_each(|(ci, block)| -> Result<()> {
            let mut x = [0.0; 2];
            let mut s = vec![0.0; k];
            for (off, r) in block.chunks_mut(k).enumerate() {
                let node = ci * (chunk / k) + off;
                self.lat.coords(node, &mut x);
                let clamped = src.eval(
                    slice,
                    t,
                    &x[..d],
                    &u[node * k..(node + 1) * k],
                    &du[node * k * d..(node + 1) * k * d],
                    &mut s,
                )?;
                if clamped {
                    clamps.fetch_add(1, Ordering::Relaxed);
                }
                r.iter_mut().zip(&s).for_each(|(ri, si)| *ri += dt * si);
            }
            Ok(())
        })?;
        Ok(rhs)
    }

    /// Explicit mixed-derivative contribution `Δt(ΣΣᵀ)₀₁ ∂²u/∂x₀∂x₁`.
    fn add_mixed(&self, coef: &StepCoefficients, du: &[f64], rhs: &mut [f64]) {
        if self.lat.dim != 2 || coef.mixed.iter().all(|m| *m == 0.0) {
            return;
        }
        let k = self.k;
        let dy: Vec<f64> = (0..du.len() / 2).map(|i| du[2 * i + 1]).collect();
        let mut g = vec![0.0; dy.len() * 2];
        self.lat.gradient(&dy, k, &mut g);
        for node in 0..self.lat.n_nodes() {
            for e in 0..k {
                rhs[node * k + e] += coef.mixed[node] * g[(node * k + e) * 2];
            }
        }
    }

    fn implicit(&self, coef: &StepCoefficients, rhs: &mut [f64]) -> Result<()> {
        for a in 0..self.lat.dim {
            sweep(&self.lat, coef, a, self.k, rhs)?;
        }
        Ok(())
    }

    fn check_divergence(&self, n: usize, u: &[f64], bound: f64) -> Result<()> {
        if let Some(pos) = u.iter().position(|v| !v.is_finite() || v.abs() > bound) {
            let node = pos / self.k;
            return Err(Error::Divergence {
                time_index: n,
                t: self.time(n),
                node,
                x: self.lat.coords_vec(node),
                component: pos % self.k,
                value: u[pos].abs(),
                bound,
            });
        }
        Ok(())
    }

    /// Marches from `terminal` (node-major, `k` per node) down to `t = 0`.
    pub fn run<S: Source>(
        &self,
        terminal: Vec<f64>,
        scheme: &SchemeParams,
        src: &S,
    ) -> Result<(Array3<f64>, Array4<f64>, SolveStats)> {
        let (nn, k, d) = (self.lat.n_nodes(), self.k, self.lat.dim);
        let mut values = Array3::<f64>::zeros((self.n_t + 1, nn, k));
        let mut gradients = Array4::<f64>::zeros((self.n_t + 1, nn, k, d));
        let clamps = AtomicU64::new(0);
        let mut stats = SolveStats::default();

        let mut u_next = terminal;
        self.check_divergence(self.n_t, &u_next, scheme.blowup)?;
        let mut g_next = self.gradient(&u_next);
        store(&mut values, &mut gradients, self.n_t, &u_next, &g_next);

        for n in (0..self.n_t).rev() {
            let coef = step_coefficients(&self.lat, self.dyn_, self.time(n), self.dt());
            let mut rhs = self.source_rhs(src, n + 1, &u_next, &u_next, &g_next, &clamps)?;
            self.add_mixed(&coef, &g_next, &mut rhs);
            self.implicit(&coef, &mut rhs)?;
            let mut u = rhs;
            self.check_divergence(n, &u, scheme.blowup)?;
            let mut g = self.gradient(&u);
            if scheme.inner_picard {
                for it in 1..=scheme.inner_iterations {
                    let mut r = self.source_rhs(src, n, &u_next, &u, &g, &clamps)?;
                    self.add_mixed(&coef, &g_next, &mut r);
                    self.implicit(&coef, &mut r)?;
                    let change = r.iter().zip(&u).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
                    u = r;
                    self.check_divergence(n, &u, scheme.blowup)?;
                    g = self.gradient(&u);
                    stats.max_inner_iterations = stats.max_inner_iterations.max(it);
                    stats.last_inner_change = change;
                    if change <= scheme.inner_tol {
                        break;
                    }
                }
            }
            store(&mut values, &mut gradients, n, &u, &g);
            u_next = u;
            g_next = g;
        }
        stats.clamped_evaluations = clamps.load(Ordering::Relaxed);
        Ok((values, gradients, stats))
    }
}

fn store(values: &mut Array3<f64>, gradients: &mut Array4<f64>, n: usize, u: &[f64], g: &[f64]) {
    values
        .index_axis_mut(Axis(0), n)
        .as_slice_mut()
        .expect("standard layout")
        .copy_from_slice(u);
    gradients
        .index_axis_mut(Axis(0), n)
        .as_slice_mut()
        .expect("standard layout")
        .copy_from_slice(g);
}

/// Negated driver `−f(t, x, u, Du·Σ)` as a marching source.
struct DriverSource<'a> {
    driver: Driver<'a>,
    econ: &'a Economy,
    dyn_: &'a StateDynamics,
}

impl<'a> Source for DriverSource<'a> {
    fn eval(&self, _slice: usize, t: f64, x: &[f64], u: &[f64], du: &[f64], out: &mut [f64]) -> Result<bool> {
        let d = x.len();
        let k = u.len();
        let mut sig = [0.0; 4];
        self.dyn_.diffusion_at(t, x, &mut sig[..d * d]);
        let mut z = vec![0.0; k * d];
        for j in 0..k {
            linalg::row_times_mat(&du[j * d..(j + 1) * d], &sig[..d * d], d, &mut z[j * d..(j + 1) * d]);
        }
        let mut endow = vec![0.0; self.econ.n_agents()];
        self.econ.endowments(t, x, &mut endow);
        let mu_e = endowment_decomposition(self.econ, self.dyn_).mu_e(t, x)?;
        let p = PointData {
            mu_e,
            endowments: &endow,
        };
        let clamped = self.driver.eval_point(&p, u, &z, d, out);
        out.iter_mut().for_each(|v| *v = -*v);
        Ok(clamped)
    }
}

fn check_dims(dyn_: &StateDynamics, grid: &GridSpec) -> Result<()> {
    grid.validate()?;
    if dyn_.dim != grid.dim() {
        return Err(Error::InvalidInput(format!(
            "state dimension {} does not match grid dimension {}",
            dyn_.dim,
            grid.dim()
        )));
    }
    Ok(())
}

/// Terminal slice `g`, clamped by `ι_N` for the truncated driver.
pub fn terminal_slice(econ: &Economy, kind: &DriverKind, lat: &Lattice) -> Vec<f64> {
    let k = econ.components();
    let mut out = vec![0.0; lat.n_nodes() * k];
    let mut x = [0.0; 2];
    for node in 0..lat.n_nodes() {
        lat.coords(node, &mut x);
        let row = &mut out[node * k..(node + 1) * k];
        econ.terminal(&x[..lat.dim], row);
        if let Some(n) = kind.terminal_clamp() {
            row.iter_mut().for_each(|v| *v = crate::drivers::iota(n, *v));
        }
    }
    out
}

/// Solves the equilibrium PDE system backward from `T`.
pub fn solve_backward(
    econ: &Economy,
    dyn_: &StateDynamics,
    driver: DriverKind,
    grid: &GridSpec,
    scheme: &SchemeParams,
) -> Result<SolutionGrid> {
    check_dims(dyn_, grid)?;
    scheme.validate()?;
    let drv = Driver::new(econ, driver)?;
    let lat = Lattice::new(grid);
    let marcher = Marcher {
        lat: lat.clone(),
        dyn_,
        horizon: econ.horizon,
        n_t: grid.t_steps,
        k: econ.components(),
    };
    let src = DriverSource {
        driver: drv,
        econ,
        dyn_,
    };
    let (values, gradients, mut stats) = marcher.run(terminal_slice(econ, &driver, &lat), scheme, &src)?;
    let mut sol = SolutionGrid {
        values,
        gradients,
        meta: SolveMeta {
            grid: grid.clone(),
            horizon: econ.horizon,
            components: econ.components(),
            driver,
            scheme: scheme.clone(),
            fingerprint: model_fingerprint(econ, dyn_, &driver, grid, scheme),
            stats: SolveStats::default(),
        },
    };
    stats.stability_dt = stability_threshold(&sol, dyn_);
    sol.meta.stats = stats;
    Ok(sol)
}

/// Largest `Δt` for which the explicit nonlinearity is expected to be
/// stable: `Δt·|∂F/∂p|/h ≤ 1` and `Δt·|∂F/∂y| ≤ 1`, from the solution.
pub fn stability_threshold(sol: &SolutionGrid, dyn_: &StateDynamics) -> f64 {
    let lat = sol.lattice();
    let (d, k) = (lat.dim, sol.components());
    let hmin = lat.h[..d].iter().cloned().fold(f64::INFINITY, f64::min);
    let mut rate: f64 = 0.0;
    let mut sig = [0.0; 4];
    let mut x = [0.0; 2];
    let mut z = [0.0; 2];
    for n in 0..=sol.t_steps() {
        let t = sol.time(n);
        for node in 0..lat.n_nodes() {
            lat.coords(node, &mut x);
            dyn_.diffusion_at(t, &x[..d], &mut sig[..d * d]);
            let snorm = linalg::operator_norm(&sig[..d * d], d);
            let a = sol.values[[n, node, 0]];
            let ea = (-a).min(700.0).exp();
            let mut worst_y: f64 = 0.0;
            for j in 0..k {
                let du: Vec<f64> = (0..d).map(|b| sol.gradients[[n, node, j, b]]).collect();
                linalg::row_times_mat(&du, &sig[..d * d], d, &mut z[..d]);
                rate = rate.max(linalg::norm(&z[..d]) * snorm / hmin);
                if j > 0 {
                    worst_y = worst_y.max((a + sol.values[[n, node, j]]).abs());
                }
            }
            rate = rate.max(ea * (1.0 + worst_y));
        }
    }
    if rate > 0.0 {
        1.0 / rate
    } else {
        f64::INFINITY
    }
}

/// `Z = Du·Σ` on every node, shaped like the gradients.
pub fn extract_z(sol: &SolutionGrid, dyn_: &StateDynamics) -> Array4<f64> {
    let lat = sol.lattice();
    let (d, k) = (lat.dim, sol.components());
    let mut z = Array4::<f64>::zeros(sol.gradients.raw_dim());
    let mut sig = [0.0; 4];
    let mut x = [0.0; 2];
    let mut row = [0.0; 2];
    for n in 0..=sol.t_steps() {
        let t = sol.time(n);
        for node in 0..lat.n_nodes() {
            lat.coords(node, &mut x);
            dyn_.diffusion_at(t, &x[..d], &mut sig[..d * d]);
            for j in 0..k {
                let du = sol.gradients.slice(s![n, node, j, ..]);
                let du: Vec<f64> = du.iter().cloned().collect();
                linalg::row_times_mat(&du, &sig[..d * d], d, &mut row[..d]);
                for a in 0..d {
                    z[[n, node, j, a]] = row[a];
                }
            }
        }
    }
    z
}

/// Time-trapezoid source for the linear expectation.
struct LinearSource<'h, H: Fn(usize, f64, &[f64]) -> f64 + Sync> {
    h: &'h H,
    dt: f64,
}

impl<'h, H: Fn(usize, f64, &[f64]) -> f64 + Sync> Source for LinearSource<'h, H> {
    fn eval(&self, slice: usize, t: f64, x: &[f64], _u: &[f64], _du: &[f64], out: &mut [f64]) -> Result<bool> {
        let hi = (self.h)(slice, t, x);
        let lo = (self.h)(slice - 1, t - self.dt, x);
        out[0] = 0.5 * (hi + lo);
        if !out[0].is_finite() {
            return Err(Error::InvalidInput(format!("source is not finite at t={t}, x={x:?}")));
        }
        Ok(false)
    }
}

/// Solves `w_t + 𝒜w + h = 0`, `w(T,·) = 0`. The source is called as
/// `h(slice, t, x)` on lattice points. Returns `w[n, node]`.
pub fn solve_linear_expectation<H>(
    dyn_: &StateDynamics,
    horizon: f64,
    grid: &GridSpec,
    scheme: &SchemeParams,
    h: H,
) -> Result<Array2<f64>>
where
    H: Fn(usize, f64, &[f64]) -> f64 + Sync,
{
    check_dims(dyn_, grid)?;
    let mut scheme = scheme.clone();
    scheme.inner_picard = false;
    let lat = Lattice::new(grid);
    let nn = lat.n_nodes();
    let marcher = Marcher {
        lat,
        dyn_,
        horizon,
        n_t: grid.t_steps,
        k: 1,
    };
    let src = LinearSource {
        h: &h,
        dt: grid.dt(horizon),
    };
    let (values, _, _) = marcher.run(vec![0.0; nn], &scheme, &src)?;
    Ok(values.index_axis(Axis(2), 0).to_owned())
}

/// Largest violation of the discrete scheme equations, with its location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub max_residual: f64,
    pub time_index: usize,
    pub node: usize,
    pub component: usize,
}

/// Recomputes every step of a 1-D solve and reports the largest residual
/// of `(I − ΔtL)uⁿ − u^{n+1} − Δt·S`. Returns `None` for 2-D grids, whose
/// split step has no single-operator residual.
pub fn discrete_residual(sol: &SolutionGrid, econ: &Economy, dyn_: &StateDynamics) -> Result<Option<ResidualReport>> {
    if sol.dim() != 1 {
        return Ok(None);
    }
    let lat = sol.lattice();
    let (nn, k) = (lat.n_nodes(), sol.components());
    let marcher = Marcher {
        lat: lat.clone(),
        dyn_,
        horizon: sol.meta.horizon,
        n_t: sol.t_steps(),
        k,
    };
    let src = DriverSource {
        driver: Driver::new(econ, sol.meta.driver)?,
        econ,
        dyn_,
    };
    let clamps = AtomicU64::new(0);
    let mut worst = ResidualReport {
        max_residual: 0.0,
        time_index: 0,
        node: 0,
        component: 0,
    };
    for n in 0..sol.t_steps() {
        let next = sol.values.index_axis(Axis(0), n + 1);
        let next = next.as_slice().unwrap();
        let cur = sol.values.index_axis(Axis(0), n);
        let cur = cur.as_slice().unwrap();
        let (slice, u_eval, g_eval) = if sol.meta.scheme.inner_picard {
            (n, cur.to_vec(), marcher.gradient(cur))
        } else {
            (n + 1, next.to_vec(), marcher.gradient(next))
        };
        let rhs = marcher.source_rhs(&src, slice, next, &u_eval, &g_eval, &clamps)?;
        let coef = step_coefficients(&lat, dyn_, sol.time(n), sol.dt());
        let c: Vec<f64> = coef.diff.iter().map(|v| v[0]).collect();
        let b: Vec<f64> = coef.adv.iter().map(|v| v[0]).collect();
        let mut line = vec![0.0; nn];
        let mut applied = vec![0.0; nn];
        for e in 0..k {
            for node in 0..nn {
                line[node] = cur[node * k + e];
            }
            apply_line(&line, &c, &b, &mut applied);
            for node in 0..nn {
                let r = if node == 0 || node == nn - 1 {
                    applied[node]
                } else {
                    applied[node] - rhs[node * k + e]
                };
                let scale = 1.0 + rhs[node * k + e].abs();
                if r.abs() / scale > worst.max_residual {
                    worst = ResidualReport {
                        max_residual: r.abs() / scale,
                        time_index: n,
                        node,
                        component: e,
                    };
                }
            }
        }
    }
    Ok(Some(worst))
}
