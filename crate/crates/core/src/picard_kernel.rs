//! Heat-kernel fixed point `u = Φ[u] + Ψ[g]` for `dξ = λ dB` in one
//! dimension, where the fundamental solution is the scaled heat kernel.
//! Used as an independent oracle for the lattice solver.
//!
//! `u` is carried on a uniform `(t, x)` lattice together with `Du`.
//! Spatial integrals are taken against the piecewise-linear interpolant of
//! the integrand, extended by constants beyond the lattice, so every
//! Gaussian moment over a cell is a closed form in `erf`. Time integrals
//! use `s = t + r²`, uniform in `r`.

use ndarray::{s, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::drivers::{Driver, DriverKind, PointData};
use crate::error::{Error, Result};
use crate::model::{endowment_decomposition, Economy, StateDynamics};

/// Kernel tails are dropped beyond this many standard deviations.
const KERNEL_CUTOFF: f64 = 9.0;
/// Half-width of the quadrature margin around the window, in units of `λ√T`.
pub const DOMAIN_SPREAD: f64 = 8.0;
const MAX_DOUBLINGS: usize = 12;

/// `φ_λ(t,x;s,x′) = (2πλ²(s−t))^{−d/2} exp(−|x′−x|²/(2λ²(s−t)))`
pub fn heat_kernel(lambda: f64, t: f64, x: &[f64], s: f64, xp: &[f64]) -> Result<f64> {
    if !(t < s) {
        return Err(Error::KernelDomain { t, s });
    }
    if x.len() != xp.len() || !(lambda > 0.0) {
        return Err(Error::InvalidInput("heat kernel needs λ > 0 and matching dimensions".into()));
    }
    let var = lambda * lambda * (s - t);
    let r2: f64 = x.iter().zip(xp).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((2.0 * PI * var).powf(-0.5 * x.len() as f64) * (-r2 / (2.0 * var)).exp())
}

/// Evaluation lattice and quadrature resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadPlan {
    /// Centre of the evaluation window.
    pub center: f64,
    pub half_width: f64,
    /// Spatial intervals across the whole quadrature domain.
    pub x_steps: usize,
    pub t_steps: usize,
    /// Uniform `r` steps on `[0, √(T−t)]`.
    pub r_steps: usize,
}

impl QuadPlan {
    pub fn new(center: f64, half_width: f64, x_steps: usize, t_steps: usize, r_steps: usize) -> Self {
        QuadPlan {
            center,
            half_width,
            x_steps,
            t_steps,
            r_steps,
        }
    }

    /// Quadrature domain: the window widened by `8λ√T` on each side.
    pub fn domain(&self, lambda: f64, horizon: f64) -> (f64, f64) {
        let m = self.half_width + DOMAIN_SPREAD * lambda * horizon.sqrt();
        (self.center - m, self.center + m)
    }

    pub fn nodes(&self, lambda: f64, horizon: f64) -> Vec<f64> {
        let (lo, hi) = self.domain(lambda, horizon);
        let h = (hi - lo) / self.x_steps as f64;
        (0..=self.x_steps).map(|j| lo + j as f64 * h).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub lambda: f64,
    /// `None` selects `β` automatically in [`picard_solve`].
    pub beta: Option<f64>,
    pub quad: QuadPlan,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("kernel spec: {m}")));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("λ must be positive");
        }
        if let Some(b) = self.beta {
            if !(b > 0.0 && b.is_finite()) {
                return bad("β must be positive");
            }
        }
        let q = &self.quad;
        if !(q.half_width >= 0.0 && q.center.is_finite()) {
            return bad("window must be finite with non-negative half-width");
        }
        if q.x_steps < 4 || q.t_steps < 2 || q.r_steps < 2 {
            return bad("need x_steps ≥ 4, t_steps ≥ 2, r_steps ≥ 2");
        }
        Ok(())
    }
}

/// A time-indexed spatial function with its gradient on the kernel lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelField {
    pub horizon: f64,
    pub x: Vec<f64>,
    /// `(t_steps+1, nodes, components)`
    pub values: Array3<f64>,
    pub grads: Array3<f64>,
}

impl KernelField {
    pub fn zeros(horizon: f64, x: Vec<f64>, t_steps: usize, k: usize) -> Self {
        let n = x.len();
        KernelField {
            horizon,
            x,
            values: Array3::zeros((t_steps + 1, n, k)),
            grads: Array3::zeros((t_steps + 1, n, k)),
        }
    }

    pub fn t_steps(&self) -> usize {
        self.values.shape()[0] - 1
    }

    pub fn components(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.t_steps() as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        if n == self.t_steps() {
            self.horizon
        } else {
            n as f64 * self.dt()
        }
    }

    fn h(&self) -> f64 {
        self.x[1] - self.x[0]
    }

    /// Linear interpolation in `x` of slice `n`.
    pub fn value_at(&self, n: usize, x: f64, out: &mut [f64]) {
        let m = self.x.len() - 1;
        let p = ((x - self.x[0]) / self.h()).clamp(0.0, m as f64);
        let j = (p.floor() as usize).min(m - 1);
        let w = p - j as f64;
        for (c, o) in out.iter_mut().enumerate() {
            *o = (1.0 - w) * self.values[[n, j, c]] + w * self.values[[n, j + 1, c]];
        }
    }

    fn combine(&self, other: &KernelField, scale: f64) -> KernelField {
        let mut out = self.clone();
        out.values.scaled_add(scale, &other.values);
        out.grads.scaled_add(scale, &other.grads);
        out
    }

    /// `sup_t ‖u(t,·)‖∞` over nodes and components.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Nonlinearity `F(s, x, u, Du)` of `u_t + ½λ²u_xx + F = 0`.
pub trait Nonlinearity: Sync {
    fn components(&self) -> usize;
    fn eval(&self, s: f64, x: f64, u: &[f64], du: &[f64], out: &mut [f64]) -> Result<()>;
}

/// Wraps a closure as a [`Nonlinearity`].
pub struct FnNonlinearity<F> {
    pub k: usize,
    pub f: F,
}

impl<F> Nonlinearity for FnNonlinearity<F>
where
    F: Fn(f64, f64, &[f64], &[f64], &mut [f64]) + Sync,
{
    fn components(&self) -> usize {
        self.k
    }

    fn eval(&self, s: f64, x: f64, u: &[f64], du: &[f64], out: &mut [f64]) -> Result<()> {
        (self.f)(s, x, u, du, out);
        Ok(())
    }
}

/// `F(s,x,y,p) = −f(s,x,y,p·λ)` for an economy driver.
pub struct DriverNonlinearity<'a> {
    driver: Driver<'a>,
    econ: &'a Economy,
    dyn_: &'a StateDynamics,
    lambda: f64,
}

impl<'a> DriverNonlinearity<'a> {
    pub fn new(econ: &'a Economy, dyn_: &'a StateDynamics, kind: DriverKind) -> Result<Self> {
        let lambda = oracle_scale(dyn_)?;
        Ok(DriverNonlinearity {
            driver: Driver::new(econ, kind)?,
            econ,
            dyn_,
            lambda,
        })
    }
}

impl Nonlinearity for DriverNonlinearity<'_> {
    fn components(&self) -> usize {
        self.econ.components()
    }

    fn eval(&self, s: f64, x: f64, u: &[f64], du: &[f64], out: &mut [f64]) -> Result<()> {
        let xs = [x];
        let mut endow = vec![0.0; self.econ.n_agents()];
        self.econ.endowments(s, &xs, &mut endow);
        let mu_e = endowment_decomposition(self.econ, self.dyn_).mu_e(s, &xs)?;
        let z: Vec<f64> = du.iter().map(|p| p * self.lambda).collect();
        let p = PointData {
            mu_e,
            endowments: &endow,
        };
        if self.driver.eval_point(&p, u, &z, 1, out) {
            return Err(Error::OracleScale(format!("exp(-a) overflow at s={s}, x={x}")));
        }
        out.iter_mut().for_each(|v| *v = -*v);
        Ok(())
    }
}

/// `λ` for dynamics `Λ ≡ 0`, `Σ ≡ λ` in one dimension.
pub fn oracle_scale(dyn_: &StateDynamics) -> Result<f64> {
    match dyn_.constant_coefficient_scale() {
        Some(l) if dyn_.dim == 1 => Ok(l),
        _ => Err(Error::InvalidInput(format!(
            "heat-kernel oracle needs d = 1 with Λ ≡ 0 and constant Σ = λ; got {}",
            dyn_.describe()
        ))),
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Product-integration weights for one kernel width, indexed by the
/// offset `e = j − i` of a cell's left node from the evaluation node.
struct Stencil {
    reach: i64,
    /// value weights for the left/right node of each cell
    wl: Vec<f64>,
    wr: Vec<f64>,
    /// differentiated-kernel weights
    gl: Vec<f64>,
    gr: Vec<f64>,
    sigma: f64,
    h: f64,
}

impl Stencil {
    fn new(sigma: f64, h: f64, m: usize) -> Stencil {
        let reach = ((KERNEL_CUTOFF * sigma / h).ceil() as i64 + 1).min(m as i64);
        let len = (2 * reach) as usize;
        let (mut wl, mut wr, mut gl, mut gr) = (vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![0.0; len]);
        let edge = |e: i64| {
            let z = e as f64 * h / sigma;
            (z, normal_cdf(z), normal_pdf(z))
        };
        let mut lo = edge(-reach);
        for (idx, e0) in (-reach..reach).enumerate() {
            let hi = edge(e0 + 1);
            let (e0f, e1f) = (e0 as f64, (e0 + 1) as f64);
            let m0 = hi.1 - lo.1;
            let m1 = sigma * (lo.2 - hi.2);
            let m2 = sigma * sigma * (m0 - (hi.0 * hi.2 - lo.0 * lo.2));
            wl[idx] = e1f * m0 - m1 / h;
            wr[idx] = m1 / h - e0f * m0;
            let s2h = sigma * sigma * h;
            gl[idx] = (e1f * h * m1 - m2) / s2h;
            gr[idx] = (m2 - e0f * h * m1) / s2h;
            lo = hi;
        }
        Stencil {
            reach,
            wl,
            wr,
            gl,
            gr,
            sigma,
            h,
        }
    }

    /// Adds `scale·∫ f φ` and `scale·∂_x∫ f φ` at every node; `f` is
    /// `(nodes, k)` row-major.
    fn apply(&self, f: &[f64], k: usize, scale: f64, val: &mut [f64], grad: &mut [f64]) {
        let n = f.len() / k;
        let m = n as i64 - 1;
        for i in 0..n as i64 {
            let jlo = (i - self.reach).max(0);
            let jhi = (i + self.reach).min(m);
            let (v, g) = (&mut val[i as usize * k..(i as usize + 1) * k], &mut grad[i as usize * k..(i as usize + 1) * k]);
            for j in jlo..jhi {
                let idx = (j - i + self.reach) as usize;
                let (a, b) = (&f[j as usize * k..(j as usize + 1) * k], &f[(j as usize + 1) * k..(j as usize + 2) * k]);
                for c in 0..k {
                    v[c] += scale * (self.wl[idx] * a[c] + self.wr[idx] * b[c]);
                    g[c] += scale * (self.gl[idx] * a[c] + self.gr[idx] * b[c]);
                }
            }
            // constant tails beyond the lattice
            let zl = -(i as f64) * self.h / self.sigma;
            let zr = (m - i) as f64 * self.h / self.sigma;
            let (ml, pl) = (normal_cdf(zl), normal_pdf(zl));
            let (mr, pr) = (normal_cdf(-zr), normal_pdf(zr));
            for c in 0..k {
                let (f0, fm) = (f[c], f[m as usize * k + c]);
                v[c] += scale * (f0 * ml + fm * mr);
                g[c] += scale * (fm * pr - f0 * pl) / self.sigma;
            }
        }
    }
}

/// Central differences inside, second-order one-sided at the ends.
fn lattice_gradient(f: &[f64], k: usize, h: f64, out: &mut [f64]) {
    let n = f.len() / k;
    for c in 0..k {
        let at = |j: usize| f[j * k + c];
        for j in 0..n {
            out[j * k + c] = if j == 0 {
                (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
            } else if j == n - 1 {
                (3.0 * at(j) - 4.0 * at(j - 1) + at(j - 2)) / (2.0 * h)
            } else {
                (at(j + 1) - at(j - 1)) / (2.0 * h)
            };
        }
    }
}

/// `Ψ[g](t,x) = ∫ g(x′) φ_λ(t,x;T,x′) dx′`; `g` is `(nodes, k)` row-major.
pub fn apply_psi(g: &[f64], k: usize, spec: &KernelSpec, horizon: f64) -> Result<KernelField> {
    spec.validate()?;
    let x = spec.quad.nodes(spec.lambda, horizon);
    if g.len() != x.len() * k {
        return Err(Error::InvalidInput(format!(
            "terminal data has {} entries, expected {}",
            g.len(),
            x.len() * k
        )));
    }
    let nt = spec.quad.t_steps;
    let mut out = KernelField::zeros(horizon, x, nt, k);
    let h = out.h();
    let slices: Vec<(Vec<f64>, Vec<f64>)> = (0..=nt)
        .into_par_iter()
        .map(|n| {
            let mut v = vec![0.0; g.len()];
            let mut dg = vec![0.0; g.len()];
            if n == nt {
                v.copy_from_slice(g);
                lattice_gradient(g, k, h, &mut dg);
            } else {
                let sigma = spec.lambda * (horizon - out.time(n)).sqrt();
                Stencil::new(sigma, h, spec.quad.x_steps).apply(g, k, 1.0, &mut v, &mut dg);
            }
            (v, dg)
        })
        .collect();
    store(&mut out, slices);
    check_finite(&out, "Ψ[g]")?;
    Ok(out)
}

fn store(out: &mut KernelField, slices: Vec<(Vec<f64>, Vec<f64>)>) {
    let (nn, k) = (out.x.len(), out.components());
    for (n, (v, g)) in slices.into_iter().enumerate() {
        out.values
            .slice_mut(s![n, .., ..])
            .assign(&ndarray::ArrayView2::from_shape((nn, k), &v).unwrap());
        out.grads
            .slice_mut(s![n, .., ..])
            .assign(&ndarray::ArrayView2::from_shape((nn, k), &g).unwrap());
    }
}

fn check_finite(f: &KernelField, what: &str) -> Result<()> {
    if f.values.iter().chain(f.grads.iter()).all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::OracleScale(format!("{what} is not finite")))
    }
}

/// `Φ[u](t,x) = ∫_t^T ∫ F(s,x′,u,Du) φ_λ(t,x;s,x′) dx′ ds` and its gradient.
pub fn apply_phi(u: &KernelField, nl: &dyn Nonlinearity, spec: &KernelSpec) -> Result<KernelField> {
    spec.validate()?;
    let k = u.components();
    if nl.components() != k {
        return Err(Error::InvalidInput(format!(
            "nonlinearity has {} components, field has {k}",
            nl.components()
        )));
    }
    let nt = u.t_steps();
    let nn = u.x.len();
    let h = u.h();
    let horizon = u.horizon;
    let r_steps = spec.quad.r_steps;
    let slices: Vec<(Vec<f64>, Vec<f64>)> = (0..=nt)
        .into_par_iter()
        .map(|n| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut v = vec![0.0; nn * k];
            let mut dv = vec![0.0; nn * k];
            if n == nt {
                return Ok((v, dv));
            }
            let t = u.time(n);
            let dr = (horizon - t).sqrt() / r_steps as f64;
            let mut f = vec![0.0; nn * k];
            let (mut uy, mut ud) = (vec![0.0; k], vec![0.0; k]);
            // trapezoid in r; the r = 0 end carries weight 2r = 0
            for q in 1..=r_steps {
                let r = q as f64 * dr;
                let s = if q == r_steps { horizon } else { t + r * r };
                let w = if q == r_steps { 0.5 } else { 1.0 } * dr * 2.0 * r;
                let (m, a) = time_cell(s, u.dt(), nt);
                for j in 0..nn {
                    for c in 0..k {
                        uy[c] = (1.0 - a) * u.values[[m, j, c]] + a * u.values[[m + 1, j, c]];
                        ud[c] = (1.0 - a) * u.grads[[m, j, c]] + a * u.grads[[m + 1, j, c]];
                    }
                    nl.eval(s, u.x[j], &uy, &ud, &mut f[j * k..(j + 1) * k])?;
                }
                Stencil::new(spec.lambda * r, h, nn - 1).apply(&f, k, w, &mut v, &mut dv);
            }
            Ok((v, dv))
        })
        .collect::<Result<_>>()?;
    let mut out = KernelField::zeros(horizon, u.x.clone(), nt, k);
    store(&mut out, slices);
    check_finite(&out, "Φ[u]")?;
    Ok(out)
}

fn time_cell(s: f64, dt: f64, nt: usize) -> (usize, f64) {
    let p = (s / dt).clamp(0.0, nt as f64);
    let m = (p.floor() as usize).min(nt - 1);
    (m, p - m as f64)
}

/// `∫₀^T e^{−β(T−t)}(‖u(t,·)‖∞ + ‖Du(t,·)‖∞) dt`, trapezoid in `t`.
pub fn weighted_norm(u: &KernelField, beta: f64) -> f64 {
    let nt = u.t_steps();
    let dt = u.dt();
    (0..=nt)
        .map(|n| {
            let sup = |a: &Array3<f64>| a.slice(s![n, .., ..]).iter().fold(0.0, |m: f64, v| m.max(v.abs()));
            let w = if n == 0 || n == nt { 0.5 } else { 1.0 };
            w * dt * (-beta * (u.horizon - u.time(n))).exp() * (sup(&u.values) + sup(&u.grads))
        })
        .sum()
}

/// Lipschitz estimate of `F` in `(y, Du)` at the nodes of `u`: the largest
/// output change per unit of `Σ|Δy| + Σ|ΔDu|`, by forward differences.
pub fn estimate_lipschitz(u: &KernelField, nl: &dyn Nonlinearity) -> Result<f64> {
    let k = u.components();
    let nt = u.t_steps();
    let stride_n = (nt / 10).max(1);
    let stride_x = (u.x.len() / 50).max(1);
    let mut best: f64 = 0.0;
    let (mut f0, mut f1) = (vec![0.0; k], vec![0.0; k]);
    for n in (0..=nt).step_by(stride_n) {
        for j in (0..u.x.len()).step_by(stride_x) {
            let y: Vec<f64> = (0..k).map(|c| u.values[[n, j, c]]).collect();
            let p: Vec<f64> = (0..k).map(|c| u.grads[[n, j, c]]).collect();
            let t = u.time(n);
            nl.eval(t, u.x[j], &y, &p, &mut f0)?;
            for which in 0..2 * k {
                let (mut y2, mut p2) = (y.clone(), p.clone());
                let target = if which < k { &mut y2[which] } else { &mut p2[which - k] };
                let step = 1e-6 * (1.0 + target.abs());
                *target += step;
                nl.eval(t, u.x[j], &y2, &p2, &mut f1)?;
                let slope = f0.iter().zip(&f1).fold(0.0, |m: f64, (a, b)| m.max((b - a).abs())) / step;
                best = best.max(slope);
            }
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub beta: f64,
    /// `‖u_{k+1} − u_k‖_β`
    pub diff_norm: f64,
    /// `diff_norm / previous diff_norm`
    pub factor: Option<f64>,
    /// `sup_t ‖u_{k+1} − u_k‖∞`
    pub diff_sup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardTrace {
    pub lipschitz_estimate: f64,
    pub beta_initial: f64,
    pub beta: f64,
    pub entries: Vec<TraceEntry>,
    /// Largest measured factor at the final `β`.
    pub contraction_factor: f64,
    /// `‖Γ[u*] − u*‖_β`
    pub fixed_point_residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardOutcome {
    pub u: KernelField,
    pub trace: PicardTrace,
}

/// Iterates `u_{k+1} = Φ[u_k] + Ψ[g]` from `u₀ = Ψ[g]` until the weighted
/// difference is at most `tol`. With `spec.beta = None`, `β` starts at
/// `4L²` for the measured Lipschitz constant `L` and doubles whenever a
/// measured factor reaches 1.
pub fn picard_iterate(
    nl: &dyn Nonlinearity,
    g: &[f64],
    spec: &KernelSpec,
    horizon: f64,
    tol: f64,
    max_iter: usize,
) -> Result<PicardOutcome> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::InvalidInput("picard needs tol > 0 and max_iter ≥ 1".into()));
    }
    let k = nl.components();
    let psi = apply_psi(g, k, spec, horizon)?;
    let lip = estimate_lipschitz(&psi, nl)?;
    let beta0 = spec.beta.unwrap_or((4.0 * lip * lip).max(1.0));
    let mut beta = beta0;
    let mut entries = Vec::new();
    for _ in 0..=MAX_DOUBLINGS {
        let mut u = psi.clone();
        let mut prev: Option<f64> = None;
        let mut worst: f64 = 0.0;
        let mut failed = None;
        for it in 1..=max_iter {
            let next = apply_phi(&u, nl, spec)?.combine(&psi, 1.0);
            let delta = next.combine(&u, -1.0);
            let diff = weighted_norm(&delta, beta);
            let factor = prev.map(|p| if p > 0.0 { diff / p } else { 0.0 });
            entries.push(TraceEntry {
                iteration: it,
                beta,
                diff_norm: diff,
                factor,
                diff_sup: delta.sup_norm(),
            });
            u = next;
            if diff <= tol {
                let residual = weighted_norm(&apply_phi(&u, nl, spec)?.combine(&psi, 1.0).combine(&u, -1.0), beta);
                return Ok(PicardOutcome {
                    u,
                    trace: PicardTrace {
                        lipschitz_estimate: lip,
                        beta_initial: beta0,
                        beta,
                        entries,
                        contraction_factor: worst,
                        fixed_point_residual: residual,
                        converged: true,
                    },
                });
            }
            if let Some(f) = factor {
                worst = worst.max(f);
                if f >= 1.0 {
                    failed = Some(f);
                    break;
                }
            }
            prev = Some(diff);
        }
        let measured = failed.unwrap_or(worst);
        if spec.beta.is_some() || failed.is_none() {
            return Err(Error::NonContraction {
                factor: measured,
                beta,
                suggested_beta: (2.0 * beta).max(4.0 * lip * lip),
            });
        }
        beta *= 2.0;
    }
    Err(Error::NonContraction {
        factor: entries.last().and_then(|e| e.factor).unwrap_or(f64::NAN),
        beta: beta / 2.0,
        suggested_beta: beta,
    })
}

/// Fixed point of `Γ = Φ + Ψ[g]` for an economy, with `g` the terminal
/// condition of the driver.
pub fn picard_solve(
    econ: &Economy,
    dyn_: &StateDynamics,
    driver: DriverKind,
    spec: &KernelSpec,
    tol: f64,
    max_iter: usize,
) -> Result<PicardOutcome> {
    let lambda = oracle_scale(dyn_)?;
    if (lambda - spec.lambda).abs() > 1e-12 * lambda {
        return Err(Error::InvalidInput(format!(
            "kernel λ = {} does not match the dynamics' Σ = {lambda}",
            spec.lambda
        )));
    }
    let nl = DriverNonlinearity::new(econ, dyn_, driver)?;
    let k = econ.components();
    let x = spec.quad.nodes(lambda, econ.horizon);
    let mut g = vec![0.0; x.len() * k];
    for (j, xj) in x.iter().enumerate() {
        let row = &mut g[j * k..(j + 1) * k];
        econ.terminal(&[*xj], row);
        if let Some(n) = driver.terminal_clamp() {
            row.iter_mut().for_each(|v| *v = crate::drivers::iota(n, *v));
        }
    }
    picard_iterate(&nl, &g, spec, econ.horizon, tol, max_iter)
}
