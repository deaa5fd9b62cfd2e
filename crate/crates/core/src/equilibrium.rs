//! Equilibrium market from a solved grid: price `A = e^a`, drift `μ`,
//! volatility `σ = Z⁰`, optimal strategies and the clearing/optimality
//! identities.

use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{endowment_decomposition, Economy, StateDynamics};
use crate::pde_solver::{extract_z, GridSpec, Lattice, SolutionGrid};

/// Equilibrium market coefficients on the solution lattice.
#[derive(Debug, Clone)]
pub struct MarketBundle {
    pub grid: GridSpec,
    pub horizon: f64,
    pub n_agents: usize,
    /// `A[n, node] = exp(a)`
    pub price: Array2<f64>,
    pub mu: Array2<f64>,
    /// `σ[n, node, ·] = Z⁰`
    pub sigma: Array3<f64>,
    /// `Z[n, node, i, ·]` for agents `i = 0..I` (row `i+1` of the system)
    pub z: Array4<f64>,
    /// Packed `(a, Y¹…Y^I, μ, σ…)` per node, for path interpolation.
    packed: Array3<f64>,
}

/// `μ = ba·μₑ + ½|σ|² − ½Σκ^i|Z^i|²`
pub fn market_drift(ba: f64, mu_e: f64, sigma: &[f64], z_rows: &[&[f64]], kappas: &[f64]) -> f64 {
    let s2: f64 = sigma.iter().map(|v| v * v).sum();
    let zq: f64 = z_rows
        .iter()
        .zip(kappas)
        .map(|(z, k)| k * z.iter().map(|v| v * v).sum::<f64>())
        .sum();
    ba * mu_e + 0.5 * s2 - 0.5 * zq
}

pub fn assemble_market(sol: &SolutionGrid, econ: &Economy, dyn_: &StateDynamics) -> Result<MarketBundle> {
    sol.check_finite()?;
    if sol.components() != econ.components() {
        return Err(Error::InvalidInput("solution and economy have different component counts".into()));
    }
    let lat = sol.lattice();
    let (nt, nn, d, ni) = (sol.t_steps() + 1, lat.n_nodes(), lat.dim, econ.n_agents());
    let zfull = extract_z(sol, dyn_);
    let dec = endowment_decomposition(econ, dyn_);
    let kp = 1 + ni + 1 + d;
    let mut price = Array2::zeros((nt, nn));
    let mut mu = Array2::zeros((nt, nn));
    let mut sigma = Array3::zeros((nt, nn, d));
    let mut z = Array4::zeros((nt, nn, ni, d));
    let mut packed = Array3::zeros((nt, nn, kp));
    let mut x = [0.0; 2];
    for n in 0..nt {
        let t = sol.time(n);
        for node in 0..nn {
            lat.coords(node, &mut x);
            let a = sol.values[[n, node, 0]];
            price[[n, node]] = a.exp();
            let sig: Vec<f64> = (0..d).map(|b| zfull[[n, node, 0, b]]).collect();
            let rows: Vec<Vec<f64>> = (1..=ni)
                .map(|j| (0..d).map(|b| zfull[[n, node, j, b]]).collect())
                .collect();
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
            let m = market_drift(econ.ba, dec.mu_e(t, &x[..d])?, &sig, &refs, &econ.kappas);
            mu[[n, node]] = m;
            packed[[n, node, 0]] = a;
            for i in 0..ni {
                packed[[n, node, 1 + i]] = sol.values[[n, node, 1 + i]];
                for b in 0..d {
                    z[[n, node, i, b]] = rows[i][b];
                }
            }
            packed[[n, node, 1 + ni]] = m;
            for b in 0..d {
                sigma[[n, node, b]] = sig[b];
                packed[[n, node, 2 + ni + b]] = sig[b];
            }
        }
    }
    if price.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
        return Err(Error::Scheme("annuity price is not positive and finite".into()));
    }
    Ok(MarketBundle {
        grid: sol.meta.grid.clone(),
        horizon: sol.meta.horizon,
        n_agents: ni,
        price,
        mu,
        sigma,
        z,
        packed,
    })
}

/// Market coefficients interpolated at a single `(t, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCoefficients {
    pub a: f64,
    pub y: Vec<f64>,
    pub mu: f64,
    pub sigma: Vec<f64>,
}

impl PointCoefficients {
    pub fn zeros(n_agents: usize, dim: usize) -> Self {
        PointCoefficients {
            a: 0.0,
            y: vec![0.0; n_agents],
            mu: 0.0,
            sigma: vec![0.0; dim],
        }
    }

    pub fn price(&self) -> f64 {
        self.a.exp()
    }
}

impl MarketBundle {
    pub fn lattice(&self) -> Lattice {
        Lattice::new(&self.grid)
    }

    pub fn dt(&self) -> f64 {
        self.grid.dt(self.horizon)
    }

    /// Bilinear (time × space) interpolation. Returns `true` if `x` lies
    /// outside the lattice and was clamped.
    pub fn coefficients_at(&self, lat: &Lattice, t: f64, x: &[f64], out: &mut PointCoefficients) -> bool {
        let nt = self.grid.t_steps;
        let s = (t / self.dt()).clamp(0.0, nt as f64);
        let n = (s.floor() as usize).min(nt - 1);
        let w = s - n as f64;
        let loc = lat.locate(x);
        let lo = self.packed.index_axis(Axis(0), n);
        let hi = self.packed.index_axis(Axis(0), n + 1);
        let (lo, hi) = (lo.as_slice().unwrap(), hi.as_slice().unwrap());
        let k = self.packed.shape()[2];
        let at = |e: usize| (1.0 - w) * lat.interpolate(lo, k, e, &loc) + w * lat.interpolate(hi, k, e, &loc);
        out.a = at(0);
        for i in 0..self.n_agents {
            out.y[i] = at(1 + i);
        }
        out.mu = at(1 + self.n_agents);
        for b in 0..out.sigma.len() {
            out.sigma[b] = at(2 + self.n_agents + b);
        }
        loc.outside
    }
}

/// Location and size of the largest clearing-identity violation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearingIdentity {
    pub max_residual: f64,
    pub time_index: usize,
    pub node: usize,
}

/// `max |a + Σκ^i Y^i − ba·e(t,x)|` over every node.
pub fn clearing_identity(sol: &SolutionGrid, econ: &Economy) -> ClearingIdentity {
    let lat = sol.lattice();
    let d = lat.dim;
    let mut out = ClearingIdentity {
        max_residual: 0.0,
        time_index: 0,
        node: 0,
    };
    let mut x = [0.0; 2];
    for n in 0..=sol.t_steps() {
        let t = sol.time(n);
        for node in 0..lat.n_nodes() {
            lat.coords(node, &mut x);
            let r = clearing_residual_at(sol, econ, n, node, t, &x[..d]);
            if r > out.max_residual {
                out = ClearingIdentity {
                    max_residual: r,
                    time_index: n,
                    node,
                };
            }
        }
    }
    out
}

fn clearing_residual_at(sol: &SolutionGrid, econ: &Economy, n: usize, node: usize, t: f64, x: &[f64]) -> f64 {
    let mut f = sol.values[[n, node, 0]];
    for (i, k) in econ.kappas.iter().enumerate() {
        f += k * sol.values[[n, node, i + 1]];
    }
    (f - econ.ba * econ.aggregate_endowment(t, x)).abs()
}

/// Problem-scale constant for the clearing identity.
///
/// The residual `G = a + Σκ^iY^i − ba·e` obeys the discrete linear equation
/// `(I − ΔtL)Gⁿ = (1 − Δt e^{−a})G^{n+1} + ba·τⁿ`, where `τ` is the local
/// truncation error of the scheme applied to `e`. Summing over the steps,
/// `|G| ≤ ba·T·exp(T·sup e^{−a})·(c_t·Δt + c_x·Δx²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearingScale {
    /// `ba·T·exp(T·sup e^{−a})·max(c_t, c_x)`
    pub constant: f64,
    /// `sup(½|e_tt| + |∂_t(𝒜e)|)`
    pub c_t: f64,
    /// `sup Σ_a(½(ΣΣᵀ)_aa|∂⁴_a e|/12 + |Λ_a||∂³_a e|/6)` over the lattice.
    pub c_x: f64,
    pub sup_exp_neg_a: f64,
    /// `ba·T·exp(T·sup e^{−a})·sup_∂ Σ_a|∂²_a e|`: the linear extrapolation
    /// at the edge of the domain drops `e_xx` there. Not mesh-scaled; it is
    /// small only when the domain is wide enough for `e` to be flat at the edge.
    pub boundary_defect: f64,
}

impl ClearingScale {
    /// `5·(Δt + Δx²)·constant`
    pub fn tolerance(&self, grid: &GridSpec, horizon: f64) -> f64 {
        let dx2 = (0..grid.dim()).map(|a| grid.dx(a).powi(2)).fold(0.0, f64::max);
        5.0 * (grid.dt(horizon) + dx2) * self.constant
    }
}

/// Estimates the derivatives of the aggregate endowment by finite
/// differences on the lattice scales and combines them into [`ClearingScale`].
pub fn clearing_scale(sol: &SolutionGrid, econ: &Economy, dyn_: &StateDynamics) -> Result<ClearingScale> {
    let lat = sol.lattice();
    let d = lat.dim;
    let horizon = sol.meta.horizon;
    let dt = sol.dt();
    let dec = endowment_decomposition(econ, dyn_);
    let e = |t: f64, x: &[f64]| econ.aggregate_endowment(t, x);
    let sup_ea = sol
        .values
        .index_axis(Axis(2), 0)
        .iter()
        .map(|a| (-a).exp())
        .fold(0.0, f64::max);
    let mut c_t: f64 = 0.0;
    let mut c_x: f64 = 0.0;
    let mut edge: f64 = 0.0;
    let mut x = [0.0; 2];
    let mut lam = [0.0; 2];
    let mut sig = [0.0; 4];
    let stride_t = (sol.t_steps() / 200).max(1);
    let mut n = 0;
    while n <= sol.t_steps() {
        let t = sol.time(n);
        let tl = (t - dt).max(0.0);
        let th = (t + dt).min(horizon);
        let tm = 0.5 * (tl + th);
        for node in 0..lat.n_nodes() {
            lat.coords(node, &mut x);
            let xs = &x[..d];
            // time derivatives on [tl, th]
            let h = th - tl;
            let ett = 4.0 * (e(th, xs) - 2.0 * e(tm, xs) + e(tl, xs)) / (h * h);
            let gen_hi = dec.mu_e(th, xs)? - time_derivative(&e, th, xs, dt, horizon);
            let gen_lo = dec.mu_e(tl, xs)? - time_derivative(&e, tl, xs, dt, horizon);
            c_t = c_t.max(0.5 * ett.abs() + ((gen_hi - gen_lo) / h).abs());
            // spatial derivatives along each axis
            dyn_.drift_at(t, xs, &mut lam[..d]);
            dyn_.diffusion_at(t, xs, &mut sig[..d * d]);
            let mut interior = 0.0;
            let mut boundary = 0.0;
            let mut on_boundary = false;
            for a in 0..d {
                let ha = lat.h[a];
                let at = |k: f64| {
                    let mut y = [xs[0], if d == 2 { xs[1] } else { 0.0 }];
                    y[a] += k * ha;
                    e(t, &y[..d])
                };
                let (m2, m1, z0, p1, p2) = (at(-2.0), at(-1.0), at(0.0), at(1.0), at(2.0));
                let d4 = (m2 - 4.0 * m1 + 6.0 * z0 - 4.0 * p1 + p2) / ha.powi(4);
                let d3 = (p2 - 2.0 * p1 + 2.0 * m1 - m2) / (2.0 * ha.powi(3));
                let d2 = (p1 - 2.0 * z0 + m1) / (ha * ha);
                let saa: f64 = (0..d).map(|k| sig[a * d + k].powi(2)).sum();
                interior += 0.5 * saa * d4.abs() / 12.0 + lam[a].abs() * d3.abs() / 6.0;
                let p = lat.position(node, a);
                if p == 0 || p == lat.n[a] - 1 {
                    on_boundary = true;
                }
                boundary += d2.abs();
            }
            c_x = c_x.max(interior);
            if on_boundary {
                edge = edge.max(boundary);
            }
        }
        n += stride_t;
    }
    let growth = econ.ba * horizon * (horizon * sup_ea).exp();
    Ok(ClearingScale {
        constant: growth * c_t.max(c_x),
        c_t,
        c_x,
        sup_exp_neg_a: sup_ea,
        boundary_defect: growth * edge,
    })
}

fn time_derivative<E: Fn(f64, &[f64]) -> f64>(e: &E, t: f64, x: &[f64], dt: f64, horizon: f64) -> f64 {
    let lo = (t - 0.5 * dt).max(0.0);
    let hi = (t + 0.5 * dt).min(horizon);
    (e(hi, x) - e(lo, x)) / (hi - lo)
}

/// One Euler step of `dX̂ = (μX̂ + e^i − (a+Y^i)/α^i − X̂/A)dt + X̂σ·dB`.
pub fn wealth_sde_step(c: &PointCoefficients, alpha: f64, agent: usize, endowment: f64, x_hat: f64, dt: f64, db: &[f64]) -> f64 {
    let a_price = c.price();
    let drift = c.mu * x_hat + endowment - (c.a + c.y[agent]) / alpha - x_hat / a_price;
    let noise: f64 = c.sigma.iter().zip(db).map(|(s, b)| s * b).sum();
    x_hat + drift * dt + x_hat * noise
}

/// One simulated path of the optimal strategies of every agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyPath {
    pub path_id: usize,
    pub times: Vec<f64>,
    /// `[step][a]`, flattened
    pub states: Vec<f64>,
    pub dim: usize,
    /// `log A` along the path
    pub log_price: Vec<f64>,
    /// `[agent][step]`
    pub y: Vec<Vec<f64>>,
    pub endowments: Vec<Vec<f64>>,
    pub wealth: Vec<Vec<f64>>,
    pub holding: Vec<Vec<f64>>,
    pub consumption: Vec<Vec<f64>>,
}

impl StrategyPath {
    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn price(&self, k: usize) -> f64 {
        self.log_price[k].exp()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }
}

/// Per-path clearing residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct PathClearing {
    /// `|Σπ̂^i − 1|` for `t < T`
    pub pi: Vec<f64>,
    /// `|Σĉ^i − (e+1)|` for `t < T`
    pub c: Vec<f64>,
    /// `|ΣX̂^i_T − 1|`
    pub terminal: f64,
    /// `max_t |ΣX̂^i − A|`
    pub aggregate_gap: f64,
}

pub fn path_clearing(path: &StrategyPath, econ: &Economy) -> PathClearing {
    let n = path.n_steps();
    let ni = econ.n_agents();
    let mut pi = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    let mut gap: f64 = 0.0;
    for k in 0..=n {
        let sum_x: f64 = (0..ni).map(|i| path.wealth[i][k]).sum();
        gap = gap.max((sum_x - path.price(k)).abs());
        if k < n {
            let sp: f64 = (0..ni).map(|i| path.holding[i][k]).sum();
            let sc: f64 = (0..ni).map(|i| path.consumption[i][k]).sum();
            let e: f64 = (0..ni).map(|i| path.endowments[i][k]).sum();
            pi.push((sp - 1.0).abs());
            c.push((sc - (e + 1.0)).abs());
        }
    }
    let sum_t: f64 = (0..ni).map(|i| path.wealth[i][n]).sum();
    PathClearing {
        pi,
        c,
        terminal: (sum_t - 1.0).abs(),
        aggregate_gap: gap,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearingReport {
    pub n_paths: usize,
    pub seed: u64,
    /// `max_paths |Σπ̂ − 1|` per lattice time `t < T`
    pub pi_by_time: Vec<f64>,
    /// `max_paths |Σĉ − (e+1)|` per lattice time `t < T`
    pub c_by_time: Vec<f64>,
    pub sup_pi: f64,
    pub sup_c: f64,
    pub mean_pi: f64,
    pub mean_c: f64,
    /// `max_paths |ΣX̂_T − 1|`
    pub terminal_wealth: f64,
    /// `max |ΣX̂ − A|`
    pub aggregate_wealth_gap: f64,
}

/// Streaming accumulator behind [`clearing_residuals`]; feed paths in a
/// fixed order for reproducible means.
#[derive(Debug, Clone)]
pub struct ClearingAccumulator {
    report: ClearingReport,
    count: usize,
    sum_pi: f64,
    sum_c: f64,
}

impl ClearingAccumulator {
    pub fn new(n_steps: usize, seed: u64) -> Self {
        ClearingAccumulator {
            report: ClearingReport {
                n_paths: 0,
                seed,
                pi_by_time: vec![0.0; n_steps],
                c_by_time: vec![0.0; n_steps],
                sup_pi: 0.0,
                sup_c: 0.0,
                mean_pi: 0.0,
                mean_c: 0.0,
                terminal_wealth: 0.0,
                aggregate_wealth_gap: 0.0,
            },
            count: 0,
            sum_pi: 0.0,
            sum_c: 0.0,
        }
    }

    pub fn push(&mut self, pc: &PathClearing) -> Result<()> {
        let r = &mut self.report;
        if pc.pi.len() != r.pi_by_time.len() {
            return Err(Error::InvalidInput("paths have different time lattices".into()));
        }
        for (k, (p, c)) in pc.pi.iter().zip(&pc.c).enumerate() {
            r.pi_by_time[k] = r.pi_by_time[k].max(*p);
            r.c_by_time[k] = r.c_by_time[k].max(*c);
            self.sum_pi += p;
            self.sum_c += c;
            self.count += 1;
        }
        r.terminal_wealth = r.terminal_wealth.max(pc.terminal);
        r.aggregate_wealth_gap = r.aggregate_wealth_gap.max(pc.aggregate_gap);
        r.n_paths += 1;
        Ok(())
    }

    pub fn finish(mut self) -> ClearingReport {
        let r = &mut self.report;
        r.sup_pi = r.pi_by_time.iter().cloned().fold(0.0, f64::max);
        r.sup_c = r.c_by_time.iter().cloned().fold(0.0, f64::max);
        if self.count > 0 {
            r.mean_pi = self.sum_pi / self.count as f64;
            r.mean_c = self.sum_c / self.count as f64;
        }
        self.report
    }
}

pub fn clearing_residuals(paths: &[StrategyPath], econ: &Economy, seed: u64) -> Result<ClearingReport> {
    let first = paths
        .first()
        .ok_or_else(|| Error::InvalidInput("no paths to check".into()))?;
    econ.check_initial_holdings()?;
    let mut acc = ClearingAccumulator::new(first.n_steps(), seed);
    for p in paths {
        if p.times != first.times {
            return Err(Error::InvalidInput(format!(
                "path {} has a different time lattice from path {}",
                p.path_id, first.path_id
            )));
        }
        acc.push(&path_clearing(p, econ))?;
    }
    Ok(acc.finish())
}

/// `μ_V = −e^{−αc} + w(1 − log w) − αc·w`, `w = −Ṽ/A = exp(−αX/A − Y − a)`.
pub fn value_drift(alpha: f64, a: f64, y: f64, x_over_a: f64, c: f64) -> f64 {
    let lw = -alpha * x_over_a - y - a;
    let w = lw.exp();
    -(-alpha * c).exp() + w * (1.0 - lw) - alpha * c * w
}

/// Consumption rule of a tested strategy. All are self-financing: wealth
/// follows `dX = π dA + (e − c + π)dt` with `π = X/A`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Strategy {
    /// `(π̂, ĉ)` with `X̂` from the wealth SDE
    Optimal,
    /// `c = (a+Y)/α + X/A + δ`
    ConsumptionShift { delta: f64 },
    /// `c = (a+Y)/α + (1+ε)X/A`: consumes as if holding `(1+ε)` times the position
    HoldingScale { epsilon: f64 },
}

/// Samples of `μ_V` at every step `t < T` of the path for agent `i`.
pub fn optimality_drift_check(path: &StrategyPath, econ: &Economy, agent: usize, strategy: Strategy) -> Vec<f64> {
    let alpha = econ.agents[agent].risk_aversion;
    let n = path.n_steps();
    let mut out = Vec::with_capacity(n);
    match strategy {
        Strategy::Optimal => {
            for k in 0..n {
                let xa = path.wealth[agent][k] / path.price(k);
                out.push(value_drift(
                    alpha,
                    path.log_price[k],
                    path.y[agent][k],
                    xa,
                    path.consumption[agent][k],
                ));
            }
        }
        _ => {
            let mut x = econ.agents[agent].initial_holding * path.price(0);
            for k in 0..n {
                let (a, y) = (path.log_price[k], path.y[agent][k]);
                let pi = x / path.price(k);
                let c = match strategy {
                    Strategy::ConsumptionShift { delta } => (a + y) / alpha + pi + delta,
                    Strategy::HoldingScale { epsilon } => (a + y) / alpha + (1.0 + epsilon) * pi,
                    Strategy::Optimal => unreachable!(),
                };
                out.push(value_drift(alpha, a, y, pi, c));
                let dt = path.times[k + 1] - path.times[k];
                x += pi * (path.price(k + 1) - path.price(k)) + (path.endowments[agent][k] - c + pi) * dt;
            }
        }
    }
    out
}

/// The default perturbation family: five consumption shifts and five
/// holding scales.
pub fn perturbation_family() -> Vec<Strategy> {
    let mut v: Vec<Strategy> = [-0.2, -0.1, 0.05, 0.1, 0.3]
        .iter()
        .map(|&delta| Strategy::ConsumptionShift { delta })
        .collect();
    v.extend(
        [-0.5, -0.25, 0.1, 0.25, 0.5]
            .iter()
            .map(|&epsilon| Strategy::HoldingScale { epsilon }),
    );
    v
}
