use radner_core::drivers::{bf_split, DriverInput, DriverKind, TruncationLevel};
use radner_core::equilibrium::{assemble_market, PointCoefficients};
use radner_core::pde_solver::{read_container, solve_backward, write_container, write_csv_slice, SolutionGrid};
use radner_core::picard_kernel::{oracle_scale, picard_solve};
use radner_core::report::{
    bmo_checks, bounds_checks, bounds_section, compare_solutions, lattice_bounds, solution_section, write_json, BmoSection,
    Check, DiagnosticsReport, MeshSection, Versions,
};
use radner_core::simulate::{bmo_estimate, simulate_equilibrium, write_paths_csv, SimulationOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use std::path::{Path, PathBuf};

use crate::config::{ConfigError, Model, RunConfig};

/// Largest `μ_V` accepted over perturbed strategies.
pub const MU_V_TOL: f64 = 1e-8;
/// Largest `|μ_V|` accepted along the optimal strategy.
pub const MU_V_OPTIMAL_TOL: f64 = 1e-6;
const SPLIT_PROBES: usize = 10_000;

#[derive(Debug)]
pub enum CliError {
    Config(ConfigError),
    Solver(radner_core::Error),
    Fingerprint { expected: String, found: String, path: PathBuf },
    Artifact(String),
    Unsupported(String),
    Checks { report: PathBuf, failed: Vec<String> },
    Io(std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(_) => 3,
            CliError::Fingerprint { .. } | CliError::Artifact(_) => 4,
            CliError::Unsupported(_) => 5,
            CliError::Checks { .. } | CliError::Io(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Solver(_) => "solver",
            CliError::Fingerprint { .. } => "fingerprint",
            CliError::Artifact(_) => "artifact",
            CliError::Unsupported(_) => "unsupported",
            CliError::Checks { .. } => "checks",
            CliError::Io(_) => "io",
        }
    }

    /// Machine-readable description for stderr.
    pub fn to_json(&self) -> serde_json::Value {
        let mut body = json!({
            "kind": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        match self {
            CliError::Config(e) => body["line"] = json!(e.line),
            CliError::Solver(radner_core::Error::Divergence {
                time_index,
                t,
                node,
                x,
                component,
                value,
                ..
            }) => {
                body["location"] = json!({
                    "time_index": time_index, "t": t, "node": node, "x": x,
                    "component": component, "value": value,
                })
            }
            CliError::Solver(radner_core::Error::NonContraction {
                factor,
                beta,
                suggested_beta,
            }) => body["contraction"] = json!({"factor": factor, "beta": beta, "suggested_beta": suggested_beta}),
            CliError::Fingerprint { expected, found, .. } => {
                body["expected"] = json!(expected);
                body["found"] = json!(found);
            }
            CliError::Checks { report, failed } => {
                body["failed"] = json!(failed);
                body["report"] = json!(report);
            }
            _ => {}
        }
        json!({ "error": body })
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Solver(e) => write!(f, "{e}"),
            CliError::Fingerprint { expected, found, path } => write!(
                f,
                "{} was produced by a different model (fingerprint {found}, config gives {expected})",
                path.display()
            ),
            CliError::Artifact(m) | CliError::Unsupported(m) => write!(f, "{m}"),
            CliError::Checks { failed, .. } => write!(f, "failed checks: {}", failed.join(", ")),
            CliError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<radner_core::Error> for CliError {
    fn from(e: radner_core::Error) -> Self {
        match e {
            radner_core::Error::Io(io) => CliError::Io(io),
            other => CliError::Solver(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

/// What a successful command wrote.
#[derive(Debug, Serialize)]
pub struct Outcome {
    pub command: &'static str,
    pub artifacts: Vec<PathBuf>,
}

fn model_of(cfg: &RunConfig, path: &Path) -> Result<Model, CliError> {
    cfg.model().map_err(|(_, message)| {
        CliError::Config(ConfigError {
            path: path.to_path_buf(),
            line: None,
            message,
        })
    })
}

fn load_solution(path: &Path, model: &Model) -> Result<SolutionGrid, CliError> {
    let sol = read_container(path).map_err(|e| CliError::Artifact(format!("cannot read solution: {e}")))?;
    let expected = model.fingerprint();
    if sol.meta.fingerprint != expected {
        return Err(CliError::Fingerprint {
            expected,
            found: sol.meta.fingerprint,
            path: path.to_path_buf(),
        });
    }
    Ok(sol)
}

fn finish(command: &'static str, report: &DiagnosticsReport, path: PathBuf, mut artifacts: Vec<PathBuf>) -> Result<Outcome, CliError> {
    write_json(&path, report)?;
    artifacts.push(path.clone());
    if report.pass() {
        Ok(Outcome { command, artifacts })
    } else {
        Err(CliError::Checks {
            report: path,
            failed: report.failures().iter().map(|c| c.name.clone()).collect(),
        })
    }
}

/// Solves the PDE system and writes the container, CSV slices and a summary.
pub fn solve(cfg: &RunConfig, cfg_path: &Path, out: &Path) -> Result<Outcome, CliError> {
    let model = model_of(cfg, cfg_path)?;
    let sol = solve_backward(&model.econ, &model.dyn_, model.driver, &model.grid, &model.scheme)?;
    let bundle = assemble_market(&sol, &model.econ, &model.dyn_)?;
    std::fs::create_dir_all(out)?;
    let mut artifacts = Vec::new();
    let container = out.join("solution.bin");
    write_container(&sol, &container)?;
    artifacts.push(container);
    if cfg.wants("csv") {
        for t in &cfg.output.csv_times {
            let n = sol.nearest_slice(*t);
            let p = out.join(format!("slice_n{n}.csv"));
            write_csv_slice(&sol, n, &p)?;
            artifacts.push(p);
        }
    }
    let x0 = &model.dyn_.x0;
    let mut c = PointCoefficients::zeros(model.econ.n_agents(), model.dyn_.dim);
    let outside = bundle.coefficients_at(&bundle.lattice(), 0.0, x0, &mut c);
    let summary = json!({
        "fingerprint": sol.meta.fingerprint,
        "versions": Versions::default(),
        "seed": cfg.simulation.seed,
        "driver": model.driver.label(),
        "mesh": MeshSection::new(&model.grid, model.econ.horizon),
        "x0": x0,
        "x0_outside_grid": outside,
        "a0": c.a,
        "A0": c.price(),
        "Y0": c.y,
        "mu0": c.mu,
        "sigma0": c.sigma,
        "stats": sol.meta.stats,
    });
    let p = out.join("summary.json");
    write_json(&p, &summary)?;
    artifacts.push(p);
    Ok(Outcome {
        command: "solve",
        artifacts,
    })
}

fn base_report(model: &Model, seed: u64) -> DiagnosticsReport {
    let mut r = DiagnosticsReport::new(MeshSection::new(&model.grid, model.econ.horizon), model.fingerprint());
    r.seed = Some(seed);
    r
}

/// Bounds and BMO sections with their checks.
fn solution_side(report: &mut DiagnosticsReport, sol: &SolutionGrid, model: &Model) -> Result<(), CliError> {
    let eb = lattice_bounds(sol, &model.econ, &model.dyn_)?;
    let b = bounds_section(sol, &model.econ, &eb);
    report.checks.extend(bounds_checks(&b));
    report.bounds = Some(b);
    let bmo = BmoSection::from(&bmo_estimate(sol, &model.econ, &model.dyn_, &eb, &model.scheme)?);
    report.checks.extend(bmo_checks(&bmo));
    report.bmo = Some(bmo);
    Ok(())
}

/// Re-checks a stored solution: terminal exactness, the clearing identity,
/// the scheme residual, a-priori bounds, BMO, truncation consistency and,
/// for the intermediate driver, the split certificate.
pub fn verify(cfg: &RunConfig, cfg_path: &Path, solution: &Path, out: &Path, seed: u64) -> Result<Outcome, CliError> {
    let model = model_of(cfg, cfg_path)?;
    let sol = load_solution(solution, &model)?;
    let mut report = base_report(&model, seed);
    let (section, checks) = solution_section(&sol, &model.econ, &model.dyn_)?;
    report.solution = Some(section);
    report.checks.extend(checks);
    solution_side(&mut report, &sol, &model)?;
    if model.driver != DriverKind::Full {
        let full = solve_backward(&model.econ, &model.dyn_, DriverKind::Full, &model.grid, &model.scheme)?;
        let tol = cfg.scheme.truncation_tol;
        let d = compare_solutions(&sol, &full, tol)?;
        let mut c = Check::at_most("truncation_consistency", d.max_diff, tol);
        if let Some((n, node, j)) = d.first {
            c = c.with_detail(format!("first disagreement at time index {n}, node {node}, component {j}"));
        }
        report.checks.push(c);
    }
    if let DriverKind::Intermediate { n, n0 } = model.driver {
        report.checks.push(split_check(&model, &sol, n, n0, seed)?);
    }
    std::fs::create_dir_all(out)?;
    finish("verify", &report, out.join("diagnostics_verify.json"), vec![])
}

/// `bf_split` at random probes: identity and bound certificates.
fn split_check(model: &Model, sol: &SolutionGrid, n: f64, n0: f64, seed: u64) -> Result<Check, CliError> {
    let level = TruncationLevel::with_inner(n, n0)?;
    let eb = lattice_bounds(sol, &model.econ, &model.dyn_)?;
    let (k, d) = (model.econ.components(), model.dyn_.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0usize;
    let mut worst: f64 = 0.0;
    for _ in 0..SPLIT_PROBES {
        let t = rng.random::<f64>() * model.econ.horizon;
        let x: Vec<f64> = (0..d)
            .map(|a| model.grid.x_min[a] + (model.grid.x_max[a] - model.grid.x_min[a]) * rng.random::<f64>())
            .collect();
        let y: Vec<f64> = (0..k).map(|_| 2.0 * n0 * (rng.random::<f64>() - 0.5)).collect();
        let z: Vec<f64> = (0..k * d).map(|_| 2.0 * n * (rng.random::<f64>() - 0.5)).collect();
        let s = bf_split(&model.econ, &model.dyn_, level, &eb, &DriverInput { t, x: &x, y: &y, z: &z })?;
        if !s.report.holds() {
            failures += 1;
        }
        let f: f64 = s.f1.iter().zip(&s.f2).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
        worst = worst.max(f);
    }
    Ok(Check::at_most("bf_split_certificate", failures as f64, 0.0)
        .with_detail(format!("{SPLIT_PROBES} probes, largest |f| {worst:.3e}")))
}

#[derive(Debug, Serialize)]
struct OracleReport {
    fingerprint: String,
    versions: Versions,
    x0: f64,
    finite_difference: Vec<f64>,
    picard: Vec<f64>,
    abs_diff: Vec<f64>,
    max_diff: f64,
    tolerance: f64,
    trace: radner_core::picard_kernel::PicardTrace,
    pass: bool,
}

/// Cross-checks the lattice solve against the heat-kernel fixed point at `(0, x₀)`.
pub fn oracle(cfg: &RunConfig, cfg_path: &Path, out: &Path) -> Result<Outcome, CliError> {
    let model = model_of(cfg, cfg_path)?;
    let lambda = oracle_scale(&model.dyn_).map_err(|e| CliError::Unsupported(e.to_string()))?;
    let o = &cfg.scheme.oracle;
    let picard = picard_solve(
        &model.econ,
        &model.dyn_,
        DriverKind::Truncated { n: o.n },
        &cfg.kernel_spec(lambda),
        o.tol,
        o.max_iter,
    )?;
    let sol = solve_backward(&model.econ, &model.dyn_, model.driver, &model.grid, &model.scheme)?;
    let k = model.econ.components();
    let x0 = model.dyn_.x0[0];
    let mut fd = vec![0.0; k];
    sol.interpolate(0.0, &[x0], &mut fd);
    let mut pk = vec![0.0; k];
    picard.u.value_at(0, x0, &mut pk);
    let abs_diff: Vec<f64> = fd.iter().zip(&pk).map(|(a, b)| (a - b).abs()).collect();
    let max_diff = abs_diff.iter().cloned().fold(0.0, f64::max);
    let report = OracleReport {
        fingerprint: model.fingerprint(),
        versions: Versions::default(),
        x0,
        finite_difference: fd,
        picard: pk,
        abs_diff,
        max_diff,
        tolerance: o.tolerance,
        pass: max_diff <= o.tolerance,
        trace: picard.trace,
    };
    std::fs::create_dir_all(out)?;
    let p = out.join("oracle.json");
    write_json(&p, &report)?;
    if report.pass {
        Ok(Outcome {
            command: "oracle",
            artifacts: vec![p],
        })
    } else {
        Err(CliError::Checks {
            report: p,
            failed: vec!["oracle_agreement".into()],
        })
    }
}

/// Monte Carlo clearing and optimality on a stored solution.
pub fn simulate(cfg: &RunConfig, cfg_path: &Path, solution: &Path, out: &Path, seed: u64) -> Result<Outcome, CliError> {
    let model = model_of(cfg, cfg_path)?;
    let sol = load_solution(solution, &model)?;
    let bundle = assemble_market(&sol, &model.econ, &model.dyn_)?;
    let spec = cfg.ensemble(seed);
    let sim = &cfg.simulation;
    let opts = SimulationOptions {
        keep_paths: if cfg.wants("csv") { sim.keep_paths } else { 0 },
        optimality_paths: sim.optimality_paths,
        ..SimulationOptions::default()
    };
    let outcome = simulate_equilibrium(&bundle, &model.econ, &model.dyn_, &spec, &opts)?;
    let mut report = base_report(&model, seed);
    report.mesh.mc_steps = Some(spec.n_steps);
    report.mesh.mc_paths = Some(spec.n_paths);
    let cl = &outcome.clearing;
    let tol = sim.clearing_tol;
    report.checks.push(Check::at_most("clearing_pi", cl.sup_pi, tol));
    report.checks.push(Check::at_most("clearing_c", cl.sup_c, tol));
    report.checks.push(Check::at_most("clearing_terminal_wealth", cl.terminal_wealth, tol));
    report.clearing = Some(cl.into());
    let op = &outcome.optimality;
    report.checks.push(Check::at_most("optimality_perturbed", op.max_mu_v_perturbed, MU_V_TOL));
    report.checks.push(Check::at_most("optimality_optimal", op.max_abs_mu_v_optimal, MU_V_OPTIMAL_TOL));
    report.optimality = Some(op.into());
    solution_side(&mut report, &sol, &model)?;
    std::fs::create_dir_all(out)?;
    let mut artifacts = Vec::new();
    if !outcome.kept.is_empty() {
        let p = out.join("paths.csv");
        write_paths_csv(&outcome.kept, &p)?;
        artifacts.push(p);
    }
    finish("simulate", &report, out.join("diagnostics.json"), artifacts)
}
