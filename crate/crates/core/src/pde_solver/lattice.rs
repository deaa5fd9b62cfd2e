use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time–space lattice specification. `x_steps[a]` counts intervals, so
/// dimension `a` carries `x_steps[a] + 1` nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub t_steps: usize,
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub x_steps: Vec<usize>,
}

impl GridSpec {
    pub fn new(t_steps: usize, x_min: Vec<f64>, x_max: Vec<f64>, x_steps: Vec<usize>) -> Result<Self> {
        let g = GridSpec {
            t_steps,
            x_min,
            x_max,
            x_steps,
        };
        g.validate()?;
        Ok(g)
    }

    /// A 1-D grid on `[center - half_width, center + half_width]`.
    pub fn centered(t_steps: usize, center: f64, half_width: f64, x_steps: usize) -> Result<Self> {
        GridSpec::new(
            t_steps,
            vec![center - half_width],
            vec![center + half_width],
            vec![x_steps],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.x_min.len();
        if !(d == 1 || d == 2) {
            return Err(Error::InvalidInput(format!("only d = 1 or 2 is supported, got {d}")));
        }
        if self.x_max.len() != d || self.x_steps.len() != d {
            return Err(Error::InvalidInput("grid bounds and steps must have the same length".into()));
        }
        if self.t_steps < 2 {
            return Err(Error::InvalidInput("need at least 2 time steps".into()));
        }
        for a in 0..d {
            if !(self.x_min[a] < self.x_max[a]) || !self.x_min[a].is_finite() || !self.x_max[a].is_finite() {
                return Err(Error::InvalidInput(format!(
                    "grid bounds must satisfy x_min < x_max in dimension {a}"
                )));
            }
            if self.x_steps[a] < 4 {
                return Err(Error::InvalidInput("need at least 4 spatial steps per dimension".into()));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.x_min.len()
    }

    pub fn dt(&self, horizon: f64) -> f64 {
        horizon / self.t_steps as f64
    }

    pub fn dx(&self, a: usize) -> f64 {
        (self.x_max[a] - self.x_min[a]) / self.x_steps[a] as f64
    }

    pub fn n_nodes(&self) -> usize {
        self.x_steps.iter().map(|s| s + 1).product()
    }

    /// Same domain with time and space steps doubled.
    pub fn refined(&self) -> Self {
        GridSpec {
            t_steps: self.t_steps * 2,
            x_min: self.x_min.clone(),
            x_max: self.x_max.clone(),
            x_steps: self.x_steps.iter().map(|s| s * 2).collect(),
        }
    }
}

/// Node bookkeeping for a validated [`GridSpec`]; node index `i + n₀·j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub dim: usize,
    pub n: [usize; 2],
    pub lo: [f64; 2],
    pub h: [f64; 2],
}

/// Cell location of a point: lower corner indices and weights in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellLocation {
    pub idx: [usize; 2],
    pub w: [f64; 2],
    pub outside: bool,
}

impl Lattice {
    pub fn new(grid: &GridSpec) -> Self {
        let d = grid.dim();
        let mut n = [1usize; 2];
        let mut lo = [0.0; 2];
        let mut h = [1.0; 2];
        for a in 0..d {
            n[a] = grid.x_steps[a] + 1;
            lo[a] = grid.x_min[a];
            h[a] = grid.dx(a);
        }
        Lattice { dim: d, n, lo, h }
    }

    pub fn n_nodes(&self) -> usize {
        self.n[0] * self.n[1]
    }

    #[inline]
    pub fn stride(&self, a: usize) -> usize {
        if a == 0 {
            1
        } else {
            self.n[0]
        }
    }

    #[inline]
    pub fn position(&self, node: usize, a: usize) -> usize {
        if a == 0 {
            node % self.n[0]
        } else {
            node / self.n[0]
        }
    }

    pub fn coords(&self, node: usize, out: &mut [f64]) {
        for a in 0..self.dim {
            out[a] = self.lo[a] + self.position(node, a) as f64 * self.h[a];
        }
    }

    pub fn coords_vec(&self, node: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim];
        self.coords(node, &mut x);
        x
    }

    /// Nearest node to `x`.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut node = 0;
        for a in 0..self.dim {
            let p = ((x[a] - self.lo[a]) / self.h[a]).round().clamp(0.0, (self.n[a] - 1) as f64) as usize;
            node += p * self.stride(a);
        }
        node
    }

    /// Locates `x` for multilinear interpolation, clamping to the domain.
    pub fn locate(&self, x: &[f64]) -> CellLocation {
        let mut loc = CellLocation {
            idx: [0; 2],
            w: [0.0; 2],
            outside: false,
        };
        for a in 0..self.dim {
            let s = (x[a] - self.lo[a]) / self.h[a];
            let max = (self.n[a] - 1) as f64;
            if !(0.0..=max).contains(&s) {
                loc.outside = true;
            }
            let s = s.clamp(0.0, max);
            let i = (s.floor() as usize).min(self.n[a] - 2);
            loc.idx[a] = i;
            loc.w[a] = s - i as f64;
        }
        loc
    }

    /// Multilinear interpolation of a node field with `k` entries per node.
    pub fn interpolate(&self, field: &[f64], k: usize, entry: usize, loc: &CellLocation) -> f64 {
        match self.dim {
            1 => {
                let i = loc.idx[0];
                let w = loc.w[0];
                (1.0 - w) * field[i * k + entry] + w * field[(i + 1) * k + entry]
            }
            _ => {
                let (i, j) = (loc.idx[0], loc.idx[1]);
                let (wx, wy) = (loc.w[0], loc.w[1]);
                let at = |ii: usize, jj: usize| field[(ii + self.n[0] * jj) * k + entry];
                (1.0 - wy) * ((1.0 - wx) * at(i, j) + wx * at(i + 1, j))
                    + wy * ((1.0 - wx) * at(i, j + 1) + wx * at(i + 1, j + 1))
            }
        }
    }

    /// Spatial gradient of a node field (`k` entries per node) into
    /// `out[node·k·d + entry·d + a]`: central differences inside, one-sided
    /// second-order differences on the boundary.
    pub fn gradient(&self, field: &[f64], k: usize, out: &mut [f64]) {
        let d = self.dim;
        for node in 0..self.n_nodes() {
            for a in 0..d {
                let s = self.stride(a);
                let p = self.position(node, a);
                let last = self.n[a] - 1;
                let h = self.h[a];
                for e in 0..k {
                    let v = |nd: usize| field[nd * k + e];
                    let g = if p == 0 {
                        (-3.0 * v(node) + 4.0 * v(node + s) - v(node + 2 * s)) / (2.0 * h)
                    } else if p == last {
                        (3.0 * v(node) - 4.0 * v(node - s) + v(node - 2 * s)) / (2.0 * h)
                    } else {
                        (v(node + s) - v(node - s)) / (2.0 * h)
                    };
                    out[node * k * d + e * d + a] = g;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn grid_validation() {
        assert!(GridSpec::new(10, vec![0.0], vec![1.0], vec![8]).is_ok());
        assert!(GridSpec::new(1, vec![0.0], vec![1.0], vec![8]).is_err());
        assert!(GridSpec::new(10, vec![1.0], vec![0.0], vec![8]).is_err());
        assert!(GridSpec::new(10, vec![0.0; 3], vec![1.0; 3], vec![8; 3]).is_err());
        assert!(GridSpec::new(10, vec![0.0], vec![1.0], vec![2]).is_err());
    }

    #[test]
    fn gradient_is_exact_for_quadratics() {
        let g = GridSpec::new(4, vec![-1.0, 0.0], vec![1.0, 2.0], vec![8, 6]).unwrap();
        let lat = Lattice::new(&g);
        let mut field = vec![0.0; lat.n_nodes()];
        let mut x = [0.0; 2];
        for node in 0..lat.n_nodes() {
            lat.coords(node, &mut x);
            field[node] = x[0] * x[0] - 3.0 * x[0] * x[1] + 0.5 * x[1] * x[1];
        }
        let mut grad = vec![0.0; lat.n_nodes() * 2];
        lat.gradient(&field, 1, &mut grad);
        for node in 0..lat.n_nodes() {
            lat.coords(node, &mut x);
            assert_relative_eq!(grad[node * 2], 2.0 * x[0] - 3.0 * x[1], epsilon = 1e-12);
            assert_relative_eq!(grad[node * 2 + 1], -3.0 * x[0] + x[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn bilinear_interpolation_reproduces_affine() {
        let g = GridSpec::new(4, vec![-1.0, 0.0], vec![1.0, 2.0], vec![8, 6]).unwrap();
        let lat = Lattice::new(&g);
        let f = |x: &[f64]| 1.0 + 2.0 * x[0] - x[1];
        let field: Vec<f64> = (0..lat.n_nodes()).map(|n| f(&lat.coords_vec(n))).collect();
        let p = [0.37, 1.11];
        let loc = lat.locate(&p);
        assert!(!loc.outside);
        assert_relative_eq!(lat.interpolate(&field, 1, 0, &loc), f(&p), epsilon = 1e-13);
        assert!(lat.locate(&[5.0, 1.0]).outside);
    }
}
