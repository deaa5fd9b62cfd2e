//! Acceptance suite. Runs every criterion at its stated tolerance, prints
//! one `PASS`/`FAIL` line each and exits non-zero if any failed.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use radner_core::drivers::{bf_split, driver_intermediate, DriverInput, DriverKind, TruncationLevel};
use radner_core::equilibrium::{assemble_market, clearing_identity, clearing_scale, MarketBundle};
use radner_core::model::{AgentSpec, DiffusionFn, DriftFn, Economy, OuParams, ScalarFn, StateDynamics};
use radner_core::pde_solver::{extract_z, solve_backward, GridSpec, SchemeParams, SolutionGrid};
use radner_core::picard_kernel::{picard_solve, KernelSpec, QuadPlan};
use radner_core::report::{bmo_checks, bounds_checks, bounds_section, compare_solutions, lattice_bounds, BmoSection};
use radner_core::simulate::{bmo_estimate, simulate_equilibrium, simulate_path, EnsembleSpec, SimulationOptions};
use rayon::prelude::*;

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(name: &'static str, pass: bool, detail: String) -> Verdict {
    Verdict { name, pass, detail }
}

fn brownian() -> StateDynamics {
    StateDynamics::new(1, DriftFn::Zero, DiffusionFn::Scalar(1.0), 1.0, vec![0.0]).unwrap()
}

fn zero_economy() -> Economy {
    Economy::new(vec![AgentSpec::new(1.0, ScalarFn::Zero, 1.0)], 1.0).unwrap()
}

fn constant_economy() -> Economy {
    Economy::new(
        vec![
            AgentSpec::new(1.0, ScalarFn::Constant(0.5), 0.3),
            AgentSpec::new(2.5, ScalarFn::Constant(0.8), 0.7),
        ],
        1.0,
    )
    .unwrap()
}

fn ou_dynamics() -> StateDynamics {
    StateDynamics::new(1, DriftFn::Zero, DiffusionFn::ExpDecay { scale: 1.0, theta: 1.0 }, 1f64.exp(), vec![0.0]).unwrap()
}

fn ou_economy() -> Economy {
    let ou = OuParams::new(1.0, 0.0, 0.5, 0.5).unwrap();
    Economy::new(
        vec![
            AgentSpec::new(1.0, ScalarFn::OuIncome { ou, base: 0.5, height: 1.0, center: 0.0, width: 1.0 }, 0.6),
            AgentSpec::new(2.0, ScalarFn::OuIncome { ou, base: 0.2, height: 0.5, center: 0.5, width: 0.8 }, 0.4),
        ],
        1.0,
    )
    .unwrap()
}

fn closed_form_grid() -> GridSpec {
    GridSpec::centered(2000, 0.0, 8.0, 200).unwrap()
}

fn solve(econ: &Economy, dyn_: &StateDynamics, g: &GridSpec) -> SolutionGrid {
    solve_backward(econ, dyn_, DriverKind::Full, g, &SchemeParams::default()).unwrap()
}

/// `sup |a − log(1+T−t)|` over the lattice.
fn a_error(sol: &SolutionGrid) -> f64 {
    let mut err: f64 = 0.0;
    for n in 0..=sol.t_steps() {
        let l = (2.0 - sol.time(n)).ln();
        for node in 0..sol.n_nodes() {
            err = err.max((sol.value(n, node, 0) - l).abs());
        }
    }
    err
}

fn zero_endowment() -> Verdict {
    let t0 = Instant::now();
    let sol = solve(&zero_economy(), &brownian(), &closed_form_grid());
    let secs = t0.elapsed().as_secs_f64();
    let mut y_err: f64 = 0.0;
    for n in 0..=sol.t_steps() {
        let l = (2.0 - sol.time(n)).ln();
        for node in 0..sol.n_nodes() {
            y_err = y_err.max((sol.value(n, node, 1) + l).abs());
        }
    }
    let a_err = a_error(&sol);
    verdict(
        "zero_endowment_closed_form",
        a_err <= 1e-3 && y_err <= 1e-3 && secs <= 10.0,
        format!("sup|a-log(1+T-t)| {a_err:.3e}, sup|Y+log(1+T-t)| {y_err:.3e} (tol 1e-3), {secs:.2}s (limit 10s)"),
    )
}

fn constant_endowment() -> Verdict {
    let econ = constant_economy();
    let sol = solve(&econ, &brownian(), &closed_form_grid());
    let l = 2f64.ln();
    let mut y_err: f64 = 0.0;
    for (i, agent) in econ.agents.iter().enumerate() {
        let exact = agent.risk_aversion * agent.endowment.value(0.0, &[0.0]) - l;
        for node in 0..sol.n_nodes() {
            y_err = y_err.max((sol.value(0, node, i + 1) - exact).abs());
        }
    }
    let a_err = a_error(&sol);
    verdict(
        "constant_endowment_closed_form",
        y_err <= 1e-3 && a_err <= 1e-3,
        format!("sup|Y(0)-(alpha c-log 2)| {y_err:.3e}, sup|a-log(1+T-t)| {a_err:.3e} (tol 1e-3)"),
    )
}

fn ou_grid(scale: usize) -> GridSpec {
    GridSpec::centered(500 * scale, 0.0, 12.0, 240 * scale).unwrap()
}

fn clearing(coarse: &SolutionGrid, fine: &SolutionGrid) -> Verdict {
    let (econ, dyn_) = (ou_economy(), ou_dynamics());
    let mut pass = true;
    let mut parts = Vec::new();
    let mut residuals = Vec::new();
    for sol in [coarse, fine] {
        let ci = clearing_identity(sol, &econ);
        let scale = clearing_scale(sol, &econ, &dyn_).unwrap();
        let tol = scale.tolerance(&sol.meta.grid, sol.meta.horizon);
        pass &= ci.max_residual <= tol;
        residuals.push(ci.max_residual);
        parts.push(format!(
            "{}x{}: {:.3e} <= {:.3e} (scale {:.3}, boundary defect {:.1e})",
            sol.meta.grid.t_steps, sol.meta.grid.x_steps[0], ci.max_residual, tol, scale.constant, scale.boundary_defect
        ));
    }
    pass &= residuals[1] < residuals[0];
    parts.push(format!("ratio {:.2}", residuals[0] / residuals[1]));
    verdict("clearing_identity", pass, parts.join("; "))
}

fn least_squares_order(ns: &[f64], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let m = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / m, ys.iter().sum::<f64>() / m);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    -sxy / sxx
}

const MC_PATHS: usize = 10_000;
const MC_SEED: u64 = 2024;
/// Step counts sharing one Brownian path per index (increments summed from the finest level).
const MC_LEVELS: [usize; 4] = [1000, 2000, 4000, 8000];
const MC_BATCHES: usize = 10;

/// Signed residuals `Σπ̂ − 1`, `Σĉ − (e+1)` at the 10³ coarse times and `ΣX̂_T − 1`.
fn path_residuals(bundle: &MarketBundle, econ: &Economy, dyn_: &StateDynamics, n: usize, path: usize) -> (Vec<[f64; 2]>, f64) {
    let spec = EnsembleSpec { n_paths: MC_PATHS, n_steps: n, seed: MC_SEED, refine: MC_LEVELS[3] / n };
    let (sp, _) = simulate_path(bundle, econ, dyn_, &spec, path).unwrap();
    let stride = n / MC_LEVELS[0];
    let sum = |v: &[Vec<f64>], j: usize| v.iter().map(|h| h[j]).sum::<f64>();
    let r = (0..=MC_LEVELS[0])
        .map(|k| {
            let j = k * stride;
            [sum(&sp.holding, j) - 1.0, sum(&sp.consumption, j) - (sum(&sp.endowments, j) + 1.0)]
        })
        .collect();
    (r, sum(&sp.wealth, n) - 1.0)
}

/// Mean squared successive-level differences per quantity, `[level pair][quantity]`.
fn level_differences(bundle: &MarketBundle, econ: &Economy, dyn_: &StateDynamics, path: usize) -> [[f64; 3]; 3] {
    let res: Vec<_> = MC_LEVELS.iter().map(|&n| path_residuals(bundle, econ, dyn_, n, path)).collect();
    let mut out = [[0.0; 3]; 3];
    for l in 0..3 {
        let (a, b) = (&res[l], &res[l + 1]);
        for q in 0..2 {
            out[l][q] = a.0.iter().zip(&b.0).map(|(u, v)| (u[q] - v[q]).powi(2)).sum::<f64>() / a.0.len() as f64;
        }
        out[l][2] = (a.1 - b.1).powi(2);
    }
    out
}

fn rms_order(sq: &[[[f64; 3]; 3]], q: usize) -> f64 {
    let ns: Vec<f64> = MC_LEVELS[..3].iter().map(|n| *n as f64).collect();
    let rms: Vec<f64> = (0..3)
        .map(|l| (sq.iter().map(|p| p[l][q]).sum::<f64>() / sq.len() as f64).sqrt())
        .collect();
    least_squares_order(&ns, &rms)
}

fn monte_carlo(bundle: &MarketBundle) -> (Verdict, Verdict) {
    let (econ, dyn_) = (ou_economy(), ou_dynamics());
    let mut sup = Vec::new();
    let mut optimality = None;
    for (k, &n) in MC_LEVELS[..3].iter().enumerate() {
        let spec = EnsembleSpec { n_paths: MC_PATHS, n_steps: n, seed: MC_SEED, refine: MC_LEVELS[3] / n };
        let mut opts = SimulationOptions::default();
        if k > 0 {
            opts.optimality_paths = 0;
        }
        let out = simulate_equilibrium(bundle, &econ, &dyn_, &spec, &opts).unwrap();
        let c = &out.clearing;
        sup.push([c.sup_pi, c.sup_c, c.terminal_wealth]);
        if k == 0 {
            optimality = Some(out.optimality);
        }
    }
    let sq: Vec<[[f64; 3]; 3]> = (0..MC_PATHS)
        .into_par_iter()
        .map(|p| level_differences(bundle, &econ, &dyn_, p))
        .collect();
    let per_batch = MC_PATHS / MC_BATCHES;

    let names = ["sup|sum pi-1|", "sup|sum c-(e+1)|", "|sum X_T-1|"];
    let mut pass = true;
    let mut parts = Vec::new();
    for (q, name) in names.iter().enumerate() {
        let order = rms_order(&sq, q);
        let batch: Vec<f64> = sq.chunks(per_batch).map(|b| rms_order(b, q)).collect();
        let mean = batch.iter().sum::<f64>() / batch.len() as f64;
        let var = batch.iter().map(|o| (o - mean).powi(2)).sum::<f64>() / (batch.len() - 1) as f64;
        let se = (var / batch.len() as f64).sqrt();
        let raw = sup[0][q];
        pass &= raw <= 1e-2 && order + 2.0 * se >= 0.5;
        parts.push(format!(
            "{name} {raw:.3e} (tol 1e-2), raw ratios {:.2}/{:.2}, strong order {order:.3} +- {se:.3} (>= 0.5 within 2 se)",
            sup[0][q] / sup[1][q],
            sup[1][q] / sup[2][q]
        ));
    }
    let mc = verdict("monte_carlo_clearing", pass, parts.join("; "));

    let o = optimality.unwrap();
    let perturbed = o.strategies.len();
    let opt_pass = o.samples >= 1000 && perturbed >= 10 && o.max_mu_v_perturbed <= 1e-8 && o.max_abs_mu_v_optimal <= 1e-6;
    let opt = verdict(
        "optimality_drift_sign",
        opt_pass,
        format!(
            "{} samples, {perturbed} perturbed strategies, max perturbed mu_V {:.3e} (<= 1e-8), max |mu_V| optimal {:.3e} (<= 1e-6)",
            o.samples, o.max_mu_v_perturbed, o.max_abs_mu_v_optimal
        ),
    );
    (mc, opt)
}

fn apriori(sol: &SolutionGrid) -> Verdict {
    let (econ, dyn_) = (ou_economy(), ou_dynamics());
    let eb = lattice_bounds(sol, &econ, &dyn_).unwrap();
    let b = bounds_section(sol, &econ, &eb);
    let bmo = BmoSection::from(&bmo_estimate(sol, &econ, &dyn_, &eb, &SchemeParams::default()).unwrap());
    let checks: Vec<_> = bounds_checks(&b).into_iter().chain(bmo_checks(&bmo)).collect();
    let detail = checks
        .iter()
        .map(|c| format!("{} {:.3e}/{:.3e}", c.name, c.value, c.tolerance))
        .collect::<Vec<_>>()
        .join("; ");
    verdict("apriori_bounds", checks.iter().all(|c| c.pass) && !checks.is_empty(), detail)
}

fn truncation(sol: &SolutionGrid) -> Verdict {
    let (econ, dyn_) = (ou_economy(), ou_dynamics());
    let u_sup = sol.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let z_sup = extract_z(sol, &dyn_).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let n = 2.0 * u_sup.max(z_sup) + 1.0;
    let truncated = solve_backward(&econ, &dyn_, DriverKind::Truncated { n }, &sol.meta.grid, &SchemeParams::default()).unwrap();
    let d = compare_solutions(sol, &truncated, 1e-10).unwrap();

    let level = TruncationLevel::with_inner(5.0, 3.0).unwrap();
    let eb = lattice_bounds(sol, &econ, &dyn_).unwrap();
    let (k, dim) = (econ.components(), dyn_.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut identity, mut certificates) = (0.0f64, 0usize);
    let probes = 10_000;
    for _ in 0..probes {
        let t = rng.random::<f64>() * econ.horizon;
        let x = [24.0 * rng.random::<f64>() - 12.0];
        let y: Vec<f64> = (0..k).map(|_| 6.0 * (rng.random::<f64>() - 0.5)).collect();
        let z: Vec<f64> = (0..k * dim).map(|_| 10.0 * (rng.random::<f64>() - 0.5)).collect();
        let inp = DriverInput { t, x: &x, y: &y, z: &z };
        let split = bf_split(&econ, &dyn_, level, &eb, &inp).unwrap();
        let f = driver_intermediate(&econ, &dyn_, level, &inp).unwrap();
        for r in 0..k {
            identity = identity.max((split.f1[r] + split.f2[r] - f[r]).abs());
        }
        certificates += split.report.holds() as usize;
    }
    verdict(
        "truncation_ladder",
        d.max_diff <= 1e-10 && identity <= 1e-12 && certificates == probes,
        format!(
            "N {n:.2}: max nodewise diff {:.3e} (tol 1e-10); split identity {identity:.3e} (tol 1e-12); certificates {certificates}/{probes}",
            d.max_diff
        ),
    )
}

fn oracle() -> Verdict {
    let t0 = Instant::now();
    let dyn_ = brownian();
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, econ) in [("zero", zero_economy()), ("constant", constant_economy())] {
        let spec = KernelSpec { lambda: 1.0, beta: None, quad: QuadPlan::new(0.0, 1.0, 96, 40, 80) };
        let out = picard_solve(&econ, &dyn_, DriverKind::Truncated { n: 5.0 }, &spec, 1e-10, 100).unwrap();
        let fd = solve(&econ, &dyn_, &closed_form_grid());
        let k = econ.components();
        let (mut pk, mut fv) = (vec![0.0; k], vec![0.0; k]);
        out.u.value_at(0, 0.0, &mut pk);
        fd.interpolate(0.0, &[0.0], &mut fv);
        let diff = pk.iter().zip(&fv).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let factor = out.trace.contraction_factor;
        pass &= out.trace.converged && factor <= 0.75 && diff <= 2e-3;
        parts.push(format!(
            "{label}: beta {:.2}, factor {factor:.3} (<= 0.75), |picard-fd| {diff:.3e} (<= 2e-3)",
            out.trace.beta
        ));
    }
    let secs = t0.elapsed().as_secs_f64();
    pass &= secs <= 60.0;
    parts.push(format!("{secs:.1}s (limit 60s)"));
    verdict("heat_kernel_oracle", pass, parts.join("; "))
}

const DETERMINISM_CONFIG: &str = r#"[state]
dim = 1
diffusion = "constant:1.0"
K = 2.0
x0 = [0.0]
T = 1.0

[[agents]]
alpha = 1.0
endowment = "constant:0.5"
pi0 = 0.3

[[agents]]
alpha = 2.5
endowment = "gaussian_bump:0.0,1.0,0.5"
pi0 = 0.7

[grid]
t_steps = 400
x_min = [-8.0]
x_max = [8.0]
x_steps = [80]

[simulation]
n_paths = 1000
n_steps = 200
seed = 99
"#;

fn determinism() -> Verdict {
    let dir = tempfile::TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, DETERMINISM_CONFIG).unwrap();
    let run = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_radner"))
            .args(args)
            .output()
            .unwrap()
            .status
            .code()
    };
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    let mut codes = vec![run(&["solve", &s(&cfg), "--out", &s(dir.path())])];
    let mut bytes = Vec::new();
    for _ in 0..2 {
        codes.push(run(&["simulate", &s(&cfg), "--out", &s(dir.path()), "--seed", "31337"]));
        bytes.push(fs::read(dir.path().join("diagnostics.json")).unwrap_or_default());
        let _ = fs::remove_file(dir.path().join("diagnostics.json"));
    }
    let same = !bytes[0].is_empty() && bytes[0] == bytes[1];
    verdict(
        "determinism",
        same && codes.iter().all(|c| matches!(c, Some(0) | Some(1))),
        format!("exit codes {codes:?}, diagnostics {} bytes, identical: {same}", bytes[0].len()),
    )
}

fn main() -> ExitCode {
    let mut verdicts = vec![zero_endowment(), constant_endowment()];
    let (econ, dyn_) = (ou_economy(), ou_dynamics());
    let coarse = solve(&econ, &dyn_, &ou_grid(1));
    let fine = solve(&econ, &dyn_, &ou_grid(2));
    verdicts.push(clearing(&coarse, &fine));
    let bundle = assemble_market(&fine, &econ, &dyn_).unwrap();
    let (mc, opt) = monte_carlo(&bundle);
    verdicts.push(mc);
    verdicts.push(opt);
    verdicts.push(apriori(&fine));
    verdicts.push(truncation(&coarse));
    verdicts.push(oracle());
    verdicts.push(determinism());

    for v in &verdicts {
        println!("{} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
    }
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!("acceptance: {} passed, {failed} failed", verdicts.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
