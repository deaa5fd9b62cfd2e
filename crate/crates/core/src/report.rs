//! Diagnostics report: stable JSON sections plus a flat list of named
//! checks, serialized with 17 significant digits.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::bounds::{a_lower_bound, apriori_constants};
use crate::drivers::EconomyBounds;
use crate::equilibrium::{clearing_identity, clearing_scale, ClearingReport};
use crate::error::Result;
use crate::model::{endowment_decomposition, Economy, StateDynamics};
use crate::pde_solver::{discrete_residual, GridSpec, SolutionGrid};
use crate::simulate::{BmoReport, OptimalityReport, RNG_ALGORITHM};

/// Slack on the nodewise lower bound for `a`.
pub const A_BOUND_SLACK: f64 = 1e-6;
/// Relative discrete-scheme residual accepted by `verify`.
pub const SCHEME_RESIDUAL_TOL: f64 = 1e-9;
/// Round-off floor added to the mesh-scaled clearing tolerance.
pub const CLEARING_ROUNDOFF: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl Check {
    /// Passes when `value ≤ tolerance`.
    pub fn at_most(name: &str, value: f64, tolerance: f64) -> Check {
        Check {
            name: name.into(),
            value,
            tolerance,
            pass: value <= tolerance,
            detail: None,
        }
    }

    /// Passes when `value ≥ tolerance`.
    pub fn at_least(name: &str, value: f64, tolerance: f64) -> Check {
        Check {
            pass: value >= tolerance,
            ..Check::at_most(name, value, tolerance)
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Check {
        self.detail = Some(detail.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearingSection {
    pub sup_pi: f64,
    pub sup_c: f64,
    pub terminal_wealth: f64,
    pub mean_pi: f64,
    pub mean_c: f64,
    pub aggregate_wealth_gap: f64,
    pub n_paths: usize,
}

impl From<&ClearingReport> for ClearingSection {
    fn from(r: &ClearingReport) -> Self {
        ClearingSection {
            sup_pi: r.sup_pi,
            sup_c: r.sup_c,
            terminal_wealth: r.terminal_wealth,
            mean_pi: r.mean_pi,
            mean_c: r.mean_c,
            aggregate_wealth_gap: r.aggregate_wealth_gap,
            n_paths: r.n_paths,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalitySection {
    #[serde(rename = "max_muV")]
    pub max_mu_v: f64,
    #[serde(rename = "min_muV_optimal")]
    pub min_mu_v_optimal: f64,
    #[serde(rename = "max_abs_muV_optimal")]
    pub max_abs_mu_v_optimal: f64,
    pub samples: usize,
    pub strategies: usize,
}

impl From<&OptimalityReport> for OptimalitySection {
    fn from(r: &OptimalityReport) -> Self {
        OptimalitySection {
            max_mu_v: r.max_mu_v,
            min_mu_v_optimal: r.min_mu_v_optimal,
            max_abs_mu_v_optimal: r.max_abs_mu_v_optimal,
            samples: r.samples,
            strategies: r.strategies.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsSection {
    pub a_min: f64,
    /// `−T·ba·‖μₑ‖∞`, the bound at `t = 0`.
    pub a_lower_bound: f64,
    /// `min over nodes of a(t,x) + (T−t)·ba·‖μₑ‖∞`
    pub a_margin: f64,
    #[serde(rename = "Y_sup")]
    pub y_sup: Vec<f64>,
    pub gronwall_bound: Vec<f64>,
    pub mu_e_sup: f64,
    pub endowment_sup: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmoSection {
    /// `sup_{t,x} E[∫_t^T |Z^i|² ds | ξ_t = x]`, row 0 is `σ`.
    pub per_row_estimate: Vec<f64>,
    pub analytic_bound: Vec<Option<f64>>,
    pub kind: String,
}

impl From<&BmoReport> for BmoSection {
    fn from(r: &BmoReport) -> Self {
        BmoSection {
            per_row_estimate: r.per_row_estimate.clone(),
            analytic_bound: r.analytic_bound.clone(),
            kind: "deterministic-time proxy".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionSection {
    pub terminal_error: f64,
    pub clearing_identity: f64,
    pub clearing_tolerance: f64,
    pub clearing_scale: f64,
    pub boundary_defect: f64,
    pub scheme_residual: Option<f64>,
    pub clamped_evaluations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshSection {
    pub horizon: f64,
    pub t_steps: usize,
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub x_steps: Vec<usize>,
    pub dt: f64,
    pub dx: Vec<f64>,
    pub mc_steps: Option<usize>,
    pub mc_paths: Option<usize>,
}

impl MeshSection {
    pub fn new(grid: &GridSpec, horizon: f64) -> Self {
        MeshSection {
            horizon,
            t_steps: grid.t_steps,
            x_min: grid.x_min.clone(),
            x_max: grid.x_max.clone(),
            x_steps: grid.x_steps.clone(),
            dt: grid.dt(horizon),
            dx: (0..grid.dim()).map(|a| grid.dx(a)).collect(),
            mc_steps: None,
            mc_paths: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub tool: String,
    pub rng: String,
    pub container: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Versions {
            tool: crate::VERSION.to_string(),
            rng: RNG_ALGORITHM.to_string(),
            container: crate::pde_solver::CONTAINER_VERSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub clearing: Option<ClearingSection>,
    pub optimality: Option<OptimalitySection>,
    pub bounds: Option<BoundsSection>,
    pub bmo: Option<BmoSection>,
    pub solution: Option<SolutionSection>,
    pub mesh: MeshSection,
    pub seed: Option<u64>,
    pub versions: Versions,
    pub fingerprint: String,
    pub checks: Vec<Check>,
}

impl DiagnosticsReport {
    pub fn new(mesh: MeshSection, fingerprint: impl Into<String>) -> Self {
        DiagnosticsReport {
            clearing: None,
            optimality: None,
            bounds: None,
            bmo: None,
            solution: None,
            mesh,
            seed: None,
            versions: Versions::default(),
            fingerprint: fingerprint.into(),
            checks: Vec::new(),
        }
    }

    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        to_json_string(self)
    }
}

/// Sup-norms of `μₑ` and `e^i` over the lattice nodes (every slice).
pub fn lattice_bounds(sol: &SolutionGrid, econ: &Economy, dyn_: &StateDynamics) -> Result<EconomyBounds> {
    let lat = sol.lattice();
    let dec = endowment_decomposition(econ, dyn_);
    let mut mu = 0.0f64;
    let mut es = vec![0.0f64; econ.n_agents()];
    let mut endow = vec![0.0; econ.n_agents()];
    let mut x = [0.0; 2];
    for n in 0..=sol.t_steps() {
        let t = sol.time(n);
        for node in 0..lat.n_nodes() {
            lat.coords(node, &mut x);
            let xs = &x[..lat.dim];
            mu = mu.max(dec.mu_e(t, xs)?.abs());
            econ.endowments(t, xs, &mut endow);
            es.iter_mut().zip(&endow).for_each(|(s, e)| *s = s.max(e.abs()));
        }
    }
    Ok(EconomyBounds {
        mu_e_sup: mu,
        endowment_sup: es,
    })
}

/// Evaluates the a-priori bounds against a solution.
pub fn bounds_section(sol: &SolutionGrid, econ: &Economy, bounds: &EconomyBounds) -> BoundsSection {
    let consts = apriori_constants(econ, bounds);
    let mut a_min = f64::INFINITY;
    let mut margin = f64::INFINITY;
    let mut y_sup = vec![0.0f64; econ.n_agents()];
    for n in 0..=sol.t_steps() {
        let lb = a_lower_bound(econ, bounds, sol.time(n));
        for node in 0..sol.n_nodes() {
            let a = sol.values[[n, node, 0]];
            a_min = a_min.min(a);
            margin = margin.min(a - lb);
            for (i, s) in y_sup.iter_mut().enumerate() {
                *s = s.max(sol.values[[n, node, i + 1]].abs());
            }
        }
    }
    BoundsSection {
        a_min,
        a_lower_bound: a_lower_bound(econ, bounds, 0.0),
        a_margin: margin,
        y_sup,
        gronwall_bound: consts.gronwall_bound,
        mu_e_sup: bounds.mu_e_sup,
        endowment_sup: bounds.endowment_sup.clone(),
    }
}

pub fn bounds_checks(b: &BoundsSection) -> Vec<Check> {
    let mut out = vec![Check::at_least("a_lower_bound", b.a_margin, -A_BOUND_SLACK)];
    for (i, (y, g)) in b.y_sup.iter().zip(&b.gronwall_bound).enumerate() {
        out.push(Check::at_most(&format!("gronwall_Y{}", i + 1), *y, *g));
    }
    out
}

pub fn bmo_checks(b: &BmoSection) -> Vec<Check> {
    b.per_row_estimate
        .iter()
        .zip(&b.analytic_bound)
        .enumerate()
        .filter_map(|(i, (est, bound))| bound.map(|bd| Check::at_most(&format!("bmo_row{i}"), *est, bd)))
        .collect()
}

/// Terminal exactness, the clearing identity against its scale, and the
/// discrete scheme residual.
pub fn solution_section(sol: &SolutionGrid, econ: &Economy, dyn_: &StateDynamics) -> Result<(SolutionSection, Vec<Check>)> {
    let lat = sol.lattice();
    let k = sol.components();
    let mut expect = vec![0.0; k];
    let mut x = [0.0; 2];
    let nt = sol.t_steps();
    let mut terminal: f64 = 0.0;
    for node in 0..lat.n_nodes() {
        lat.coords(node, &mut x);
        econ.terminal(&x[..lat.dim], &mut expect);
        if let Some(n) = sol.meta.driver.terminal_clamp() {
            expect.iter_mut().for_each(|v| *v = crate::drivers::iota(n, *v));
        }
        for (j, e) in expect.iter().enumerate() {
            terminal = terminal.max((sol.values[[nt, node, j]] - e).abs());
        }
    }
    let ci = clearing_identity(sol, econ);
    let scale = clearing_scale(sol, econ, dyn_)?;
    let tol = scale.tolerance(&sol.meta.grid, sol.meta.horizon) + CLEARING_ROUNDOFF;
    let residual = discrete_residual(sol, econ, dyn_)?;
    let section = SolutionSection {
        terminal_error: terminal,
        clearing_identity: ci.max_residual,
        clearing_tolerance: tol,
        clearing_scale: scale.constant,
        boundary_defect: scale.boundary_defect,
        scheme_residual: residual.as_ref().map(|r| r.max_residual),
        clamped_evaluations: sol.meta.stats.clamped_evaluations,
    };
    let mut checks = vec![
        Check::at_most("terminal_exact", terminal, 0.0),
        Check::at_most("clearing_identity", ci.max_residual, tol)
            .with_detail(format!("time index {}, node {}", ci.time_index, ci.node)),
    ];
    if let Some(r) = residual {
        checks.push(
            Check::at_most("scheme_residual", r.max_residual, SCHEME_RESIDUAL_TOL)
                .with_detail(format!("time index {}, node {}, component {}", r.time_index, r.node, r.component)),
        );
    }
    Ok((section, checks))
}

/// First node where two solutions on the same lattice differ by more than `tol`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disagreement {
    pub max_diff: f64,
    pub first: Option<(usize, usize, usize)>,
}

pub fn compare_solutions(a: &SolutionGrid, b: &SolutionGrid, tol: f64) -> Result<Disagreement> {
    if a.values.shape() != b.values.shape() {
        return Err(crate::Error::InvalidInput("solutions live on different lattices".into()));
    }
    let mut max_diff: f64 = 0.0;
    let mut first = None;
    for ((idx, va), vb) in a.values.indexed_iter().zip(b.values.iter()) {
        let d = (va - vb).abs();
        if !(d <= tol) && first.is_none() {
            first = Some(idx);
        }
        max_diff = max_diff.max(d);
    }
    Ok(Disagreement { max_diff, first })
}

/// Writes floats as `{:.16e}`, i.e. 17 significant digits.
#[derive(Clone, Default)]
pub struct SciFormatter(serde_json::ser::PrettyFormatter<'static>);

impl serde_json::ser::Formatter for SciFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> std::io::Result<()> {
        write!(w, "{v:.16e}")
    }
    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, v: f32) -> std::io::Result<()> {
        write!(w, "{:.16e}", v as f64)
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SciFormatter::default());
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, to_json_string(value)?)?;
    Ok(())
}
