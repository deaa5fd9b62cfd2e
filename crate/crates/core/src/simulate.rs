//! Monte Carlo paths of the state and of the equilibrium strategies, and
//! the conditional quadratic-variation proxy for the BMO norms.
//!
//! Each path draws from its own ChaCha8 stream (`seed`, stream = path
//! index), so results do not depend on scheduling.

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{apriori_constants, bmo_analytic_bound};
use crate::drivers::EconomyBounds;
use crate::equilibrium::{
    optimality_drift_check, path_clearing, wealth_sde_step, ClearingAccumulator, ClearingReport, MarketBundle,
    PathClearing, PointCoefficients, Strategy, StrategyPath,
};
use crate::error::{Error, Result};
use crate::model::{Economy, StateDynamics};
use crate::pde_solver::{extract_z, GridSpec, SchemeParams, SolutionGrid};

/// Identifies the random source in reports.
pub const RNG_ALGORITHM: &str = "ChaCha8Rng (rand_chacha 0.9), seed_from_u64(seed), stream = path index";

/// Ensemble size and noise layout. Increments are drawn on a lattice
/// `refine` times finer than `n_steps` and summed, so an ensemble with
/// `(n, 2)` sees the same Brownian paths as one with `(2n, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub refine: usize,
}

impl EnsembleSpec {
    pub fn new(n_paths: usize, n_steps: usize, seed: u64) -> Self {
        EnsembleSpec {
            n_paths,
            n_steps,
            seed,
            refine: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 || self.n_steps == 0 || self.refine == 0 {
            return Err(Error::InvalidInput("path count, step count and refinement must be positive".into()));
        }
        Ok(())
    }

    /// Brownian increments `ΔB[k·d + a]` of one path over steps of size `dt`.
    pub fn increments(&self, path: usize, dt: f64, d: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(path as u64);
        let sd = (dt / self.refine as f64).sqrt();
        let mut out = vec![0.0; self.n_steps * d];
        for k in 0..self.n_steps {
            for _ in 0..self.refine {
                for a in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    out[k * d + a] += sd * z;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub dt: f64,
    /// `[path, step, a]`, steps `0..=n_steps`
    pub states: Array3<f64>,
    /// `[path, step, a]`, steps `0..n_steps`
    pub increments: Array3<f64>,
}

fn state_step(dyn_: &StateDynamics, t: f64, x: &mut [f64], dt: f64, db: &[f64], lam: &mut [f64], sig: &mut [f64]) {
    let d = x.len();
    dyn_.drift_at(t, x, lam);
    dyn_.diffusion_at(t, x, sig);
    for a in 0..d {
        let noise: f64 = (0..d).map(|b| sig[a * d + b] * db[b]).sum();
        x[a] += lam[a] * dt + noise;
    }
}

/// Euler–Maruyama paths of `dξ = Λ dt + Σ dB` from `x₀`.
pub fn simulate_state(dyn_: &StateDynamics, horizon: f64, spec: &EnsembleSpec) -> Result<PathEnsemble> {
    spec.validate()?;
    let d = dyn_.dim;
    let n = spec.n_steps;
    let dt = horizon / n as f64;
    let paths: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..spec.n_paths)
        .into_par_iter()
        .map(|p| {
            let inc = spec.increments(p, dt, d);
            let mut states = Vec::with_capacity((n + 1) * d);
            let mut x = dyn_.x0.clone();
            let mut lam = vec![0.0; d];
            let mut sig = vec![0.0; d * d];
            states.extend_from_slice(&x);
            for k in 0..n {
                state_step(dyn_, k as f64 * dt, &mut x, dt, &inc[k * d..(k + 1) * d], &mut lam, &mut sig);
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::StateBlowup { path: p, step: k + 1 });
                }
                states.extend_from_slice(&x);
            }
            Ok((states, inc))
        })
        .collect();
    let mut states = Array3::zeros((spec.n_paths, n + 1, d));
    let mut increments = Array3::zeros((spec.n_paths, n, d));
    for (p, r) in paths.into_iter().enumerate() {
        let (s, i) = r?;
        states
            .index_axis_mut(ndarray::Axis(0), p)
            .as_slice_mut()
            .unwrap()
            .copy_from_slice(&s);
        increments
            .index_axis_mut(ndarray::Axis(0), p)
            .as_slice_mut()
            .unwrap()
            .copy_from_slice(&i);
    }
    Ok(PathEnsemble {
        n_paths: spec.n_paths,
        n_steps: n,
        seed: spec.seed,
        dt,
        states,
        increments,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOptions {
    /// Paths returned in full (for CSV output).
    pub keep_paths: usize,
    /// Paths on which the value drift is sampled.
    pub optimality_paths: usize,
    pub perturbations: Vec<Strategy>,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        SimulationOptions {
            keep_paths: 0,
            optimality_paths: 100,
            perturbations: crate::equilibrium::perturbation_family(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalityReport {
    pub strategies: Vec<Strategy>,
    pub samples: usize,
    pub optimal_samples: usize,
    /// `max μ_V` over every sampled strategy
    pub max_mu_v: f64,
    /// `max μ_V` over the perturbed strategies only
    pub max_mu_v_perturbed: f64,
    pub min_mu_v_optimal: f64,
    pub max_abs_mu_v_optimal: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutcome {
    pub kept: Vec<StrategyPath>,
    pub clearing: ClearingReport,
    pub optimality: OptimalityReport,
    /// Path points that fell outside the lattice and were clamped.
    pub extrapolations: u64,
}

/// Simulates the state and every agent's optimal wealth on one path.
pub fn simulate_path(
    bundle: &MarketBundle,
    econ: &Economy,
    dyn_: &StateDynamics,
    spec: &EnsembleSpec,
    path: usize,
) -> Result<(StrategyPath, u64)> {
    let d = dyn_.dim;
    let n = spec.n_steps;
    let ni = econ.n_agents();
    let dt = econ.horizon / n as f64;
    let lat = bundle.lattice();
    let inc = spec.increments(path, dt, d);
    let mut x = dyn_.x0.clone();
    let mut lam = vec![0.0; d];
    let mut sig = vec![0.0; d * d];
    let mut coef = PointCoefficients::zeros(ni, d);
    let mut endow = vec![0.0; ni];
    let mut out = StrategyPath {
        path_id: path,
        times: (0..=n).map(|k| if k == n { econ.horizon } else { k as f64 * dt }).collect(),
        states: Vec::with_capacity((n + 1) * d),
        dim: d,
        log_price: Vec::with_capacity(n + 1),
        y: vec![Vec::with_capacity(n + 1); ni],
        endowments: vec![Vec::with_capacity(n + 1); ni],
        wealth: vec![Vec::with_capacity(n + 1); ni],
        holding: vec![Vec::with_capacity(n + 1); ni],
        consumption: vec![Vec::with_capacity(n + 1); ni],
    };
    let mut extrap = 0u64;
    let mut wealth: Vec<f64> = Vec::new();
    for k in 0..=n {
        let t = out.times[k];
        if bundle.coefficients_at(&lat, t, &x, &mut coef) {
            extrap += 1;
        }
        econ.endowments(t, &x, &mut endow);
        let price = coef.price();
        if k == 0 {
            wealth = econ.agents.iter().map(|a| a.initial_holding * price).collect();
        }
        out.states.extend_from_slice(&x);
        out.log_price.push(coef.a);
        for i in 0..ni {
            let alpha = econ.agents[i].risk_aversion;
            out.y[i].push(coef.y[i]);
            out.endowments[i].push(endow[i]);
            out.wealth[i].push(wealth[i]);
            out.holding[i].push(wealth[i] / price);
            out.consumption[i].push((coef.a + coef.y[i]) / alpha + wealth[i] / price);
        }
        if k == n {
            break;
        }
        let db = &inc[k * d..(k + 1) * d];
        for i in 0..ni {
            wealth[i] = wealth_sde_step(&coef, econ.agents[i].risk_aversion, i, endow[i], wealth[i], dt, db);
        }
        state_step(dyn_, t, &mut x, dt, db, &mut lam, &mut sig);
        if x.iter().chain(&wealth).any(|v| !v.is_finite()) {
            return Err(Error::StateBlowup { path, step: k + 1 });
        }
    }
    Ok((out, extrap))
}

struct PathResult {
    clearing: PathClearing,
    optimal: Vec<f64>,
    perturbed_max: f64,
    perturbed_samples: usize,
    kept: Option<StrategyPath>,
    extrap: u64,
}

/// Runs every agent's optimal strategy on shared noise and reduces the
/// clearing residuals and value-drift samples over the ensemble.
pub fn simulate_equilibrium(
    bundle: &MarketBundle,
    econ: &Economy,
    dyn_: &StateDynamics,
    spec: &EnsembleSpec,
    opts: &SimulationOptions,
) -> Result<SimulationOutcome> {
    spec.validate()?;
    econ.check_initial_holdings()?;
    if dyn_.dim != bundle.grid.dim() {
        return Err(Error::InvalidInput("state and lattice dimensions differ".into()));
    }
    let mut acc = ClearingAccumulator::new(spec.n_steps, spec.seed);
    let mut kept = Vec::new();
    let mut opt = OptimalityReport {
        strategies: opts.perturbations.clone(),
        samples: 0,
        optimal_samples: 0,
        max_mu_v: f64::NEG_INFINITY,
        max_mu_v_perturbed: f64::NEG_INFINITY,
        min_mu_v_optimal: f64::INFINITY,
        max_abs_mu_v_optimal: 0.0,
    };
    let mut extrapolations = 0;
    const CHUNK: usize = 512;
    let mut start = 0;
    while start < spec.n_paths {
        let end = (start + CHUNK).min(spec.n_paths);
        let results: Vec<Result<PathResult>> = (start..end)
            .into_par_iter()
            .map(|p| {
                let (path, extrap) = simulate_path(bundle, econ, dyn_, spec, p)?;
                let clearing = path_clearing(&path, econ);
                let mut optimal = Vec::new();
                let mut perturbed_max = f64::NEG_INFINITY;
                let mut perturbed_samples = 0;
                if p < opts.optimality_paths {
                    for i in 0..econ.n_agents() {
                        optimal.extend(optimality_drift_check(&path, econ, i, Strategy::Optimal));
                        for s in &opts.perturbations {
                            let v = optimality_drift_check(&path, econ, i, *s);
                            perturbed_samples += v.len();
                            perturbed_max = v.iter().cloned().fold(perturbed_max, f64::max);
                        }
                    }
                }
                Ok(PathResult {
                    clearing,
                    optimal,
                    perturbed_max,
                    perturbed_samples,
                    kept: (p < opts.keep_paths).then_some(path),
                    extrap,
                })
            })
            .collect();
        for r in results {
            let r = r?;
            acc.push(&r.clearing)?;
            for v in &r.optimal {
                opt.max_mu_v = opt.max_mu_v.max(*v);
                opt.min_mu_v_optimal = opt.min_mu_v_optimal.min(*v);
                opt.max_abs_mu_v_optimal = opt.max_abs_mu_v_optimal.max(v.abs());
            }
            opt.optimal_samples += r.optimal.len();
            opt.samples += r.optimal.len() + r.perturbed_samples;
            opt.max_mu_v = opt.max_mu_v.max(r.perturbed_max);
            opt.max_mu_v_perturbed = opt.max_mu_v_perturbed.max(r.perturbed_max);
            extrapolations += r.extrap;
            if let Some(p) = r.kept {
                kept.push(p);
            }
        }
        start = end;
    }
    Ok(SimulationOutcome {
        kept,
        clearing: acc.finish(),
        optimality: opt,
        extrapolations,
    })
}

/// Writes one row per step per kept path:
/// `path,t,x…,A,X1…,pi1…,c1…`.
pub fn write_paths_csv(paths: &[StrategyPath], path: &std::path::Path) -> Result<()> {
    let Some(first) = paths.first() else {
        std::fs::write(path, "")?;
        return Ok(());
    };
    let ni = first.wealth.len();
    let mut cols = vec!["path".to_string(), "t".into()];
    cols.extend((0..first.dim).map(|a| format!("x{a}")));
    cols.push("A".into());
    for prefix in ["X", "pi", "c"] {
        cols.extend((1..=ni).map(|i| format!("{prefix}{i}")));
    }
    let mut out = cols.join(",");
    out.push('\n');
    for p in paths {
        for k in 0..=p.n_steps() {
            let mut row = vec![p.path_id.to_string(), format!("{:.16e}", p.times[k])];
            row.extend(p.state(k).iter().map(|v| format!("{v:.16e}")));
            row.push(format!("{:.16e}", p.price(k)));
            for series in [&p.wealth, &p.holding, &p.consumption] {
                row.extend(series.iter().map(|s| format!("{:.16e}", s[k])));
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmoReport {
    /// `sup w` for rows `0..=I`, with `w_t + 𝒜w + |Z^j|² = 0`, `w(T) = 0`
    pub per_row_estimate: Vec<f64>,
    /// Exponential-transform bound for rows `1..=I` (none for the annuity row)
    pub analytic_bound: Vec<Option<f64>>,
    /// `‖Y^i‖∞` over the lattice, the input of the bound
    pub y_sup: Vec<f64>,
}

/// Deterministic-time proxy of the squared BMO norms of `σ` and `Z^i`.
pub fn bmo_estimate(
    sol: &SolutionGrid,
    econ: &Economy,
    dyn_: &StateDynamics,
    bounds: &EconomyBounds,
    scheme: &SchemeParams,
) -> Result<BmoReport> {
    let z = extract_z(sol, dyn_);
    let lat = sol.lattice();
    let grid: &GridSpec = &sol.meta.grid;
    let d = lat.dim;
    let k = sol.components();
    let mut est = Vec::with_capacity(k);
    for j in 0..k {
        let w = crate::pde_solver::solve_linear_expectation(dyn_, sol.meta.horizon, grid, scheme, |n, _t, x| {
            let node = lat.nearest(x);
            (0..d).map(|a| z[[n, node, j, a]].powi(2)).sum()
        })?;
        est.push(w.iter().cloned().fold(0.0, f64::max));
    }
    let consts = apriori_constants(econ, bounds);
    let mut y_sup = vec![0.0; k - 1];
    let mut analytic = vec![None];
    for i in 0..k - 1 {
        y_sup[i] = sol
            .values
            .index_axis(ndarray::Axis(2), i + 1)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        analytic.push(Some(bmo_analytic_bound(y_sup[i], consts.growth[i], sol.meta.horizon)));
    }
    Ok(BmoReport {
        per_row_estimate: est,
        analytic_bound: analytic,
        y_sup,
    })
}
