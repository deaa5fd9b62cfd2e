//! TOML run configuration.
//!
//! Units: time in years, state in its own units, `alpha` per unit of
//! consumption good, endowments in consumption-good units per year.

use radner_core::drivers::DriverKind;
use radner_core::model::{AgentSpec, DiffusionFn, DriftFn, Economy, SamplePlan, ScalarFn, StateDynamics};
use radner_core::pde_solver::{model_fingerprint, GridSpec, SchemeParams};
use radner_core::picard_kernel::{KernelSpec, QuadPlan};
use radner_core::simulate::EnsembleSpec;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Holdings must sum to one share to within this.
const HOLDINGS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub state: StateSection,
    pub agents: Vec<AgentSection>,
    pub grid: GridSection,
    #[serde(default)]
    pub scheme: SchemeSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSection {
    pub dim: usize,
    /// `zero`, `constant:v` or `linear:k`
    #[serde(default = "zero_key")]
    pub drift: String,
    /// `constant:λ` or `exp_decay:θ[,scale]`
    pub diffusion: String,
    /// Bound, Lipschitz and ellipticity constant claimed for `(Λ, Σ)`.
    #[serde(rename = "K")]
    pub k: f64,
    pub x0: Vec<f64>,
    /// Horizon in years.
    #[serde(rename = "T")]
    pub horizon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSection {
    pub alpha: f64,
    /// Registry key: `zero`, `constant:c`, `affine:a,b`,
    /// `gaussian_bump:center,width,height`, `ou_income:θ,η̄,η₀,σ_η,base,height,center,width`
    pub endowment: String,
    pub pi0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub t_steps: usize,
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
    pub x_steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSection {
    /// `full`, `truncated` or `intermediate`
    #[serde(default = "full_key")]
    pub driver: String,
    #[serde(rename = "N", default)]
    pub n: Option<f64>,
    #[serde(rename = "N0", default)]
    pub n0: Option<f64>,
    #[serde(default)]
    pub inner_picard: bool,
    #[serde(default = "default_inner_iterations")]
    pub inner_iterations: usize,
    #[serde(default = "default_inner_tol")]
    pub inner_tol: f64,
    #[serde(default = "default_blowup")]
    pub blowup: f64,
    /// Nodewise agreement demanded between truncated and full solves.
    #[serde(default = "default_truncation_tol")]
    pub truncation_tol: f64,
    #[serde(default)]
    pub oracle: OracleSection,
}

impl Default for SchemeSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    #[serde(default = "default_oracle_x")]
    pub x_steps: usize,
    #[serde(default = "default_oracle_t")]
    pub t_steps: usize,
    #[serde(default = "default_oracle_r")]
    pub r_steps: usize,
    #[serde(default = "one")]
    pub half_width: f64,
    /// Fixed weight; automatic selection when absent.
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default = "default_picard_tol")]
    pub tol: f64,
    #[serde(default = "default_picard_iter")]
    pub max_iter: usize,
    /// Truncation level of the oracle's driver.
    #[serde(rename = "N", default = "default_oracle_n")]
    pub n: f64,
    /// Accepted `|FD − Picard|` at `(0, x₀)`.
    #[serde(default = "default_oracle_tolerance")]
    pub tolerance: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Paths written to `paths.csv`.
    #[serde(default = "default_keep")]
    pub keep_paths: usize,
    /// Paths on which the optimality drift is sampled.
    #[serde(default = "default_optimality_paths")]
    pub optimality_paths: usize,
    #[serde(default = "default_clearing_tol")]
    pub clearing_tol: f64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub directory: PathBuf,
    /// Any of `csv` (slices and paths) and `json` (summaries).
    #[serde(default = "default_formats")]
    pub formats: Vec<String>,
    /// Times of the CSV slices.
    #[serde(default = "default_csv_times")]
    pub csv_times: Vec<f64>,
}

impl Default for OutputSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

fn zero_key() -> String {
    "zero".into()
}
fn full_key() -> String {
    "full".into()
}
fn one() -> f64 {
    1.0
}
fn default_inner_iterations() -> usize {
    5
}
fn default_inner_tol() -> f64 {
    1e-10
}
fn default_blowup() -> f64 {
    1e6
}
fn default_truncation_tol() -> f64 {
    1e-10
}
fn default_oracle_x() -> usize {
    96
}
fn default_oracle_t() -> usize {
    40
}
fn default_oracle_r() -> usize {
    80
}
fn default_picard_tol() -> f64 {
    1e-10
}
fn default_picard_iter() -> usize {
    100
}
fn default_oracle_n() -> f64 {
    5.0
}
fn default_oracle_tolerance() -> f64 {
    2e-3
}
fn default_paths() -> usize {
    10_000
}
fn default_steps() -> usize {
    1000
}
fn default_keep() -> usize {
    10
}
fn default_optimality_paths() -> usize {
    100
}
fn default_clearing_tol() -> f64 {
    1e-2
}
fn default_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_formats() -> Vec<String> {
    vec!["json".into(), "csv".into()]
}
fn default_csv_times() -> Vec<f64> {
    vec![0.0]
}

/// A configuration error with the 1-based line it refers to, if known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: PathBuf,
    pub line: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{l}: {}", self.path.display(), self.message),
            None => write!(f, "{}: {}", self.path.display(), self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// The objects a configuration describes.
#[derive(Debug, Clone)]
pub struct Model {
    pub econ: Economy,
    pub dyn_: StateDynamics,
    pub driver: DriverKind,
    pub grid: GridSpec,
    pub scheme: SchemeParams,
}

impl Model {
    pub fn fingerprint(&self) -> String {
        model_fingerprint(&self.econ, &self.dyn_, &self.driver, &self.grid, &self.scheme)
    }

    /// Probe set covering the lattice, for sampled sup-norms and checks.
    pub fn sample_plan(&self, n_probes: usize, seed: u64) -> SamplePlan {
        SamplePlan::new(self.econ.horizon, self.grid.x_min.clone(), self.grid.x_max.clone(), n_probes, seed)
    }
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<RunConfig, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError {
            path: path.to_path_buf(),
            line: e.span().map(|s| line_of_offset(text, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.model().map_err(|(key, message)| ConfigError {
            path: path.to_path_buf(),
            line: line_of_key(text, key),
            message,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: path.to_path_buf(),
            line: None,
            message: e.to_string(),
        })?;
        RunConfig::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Builds and validates the model; errors name the offending key.
    pub fn model(&self) -> Result<Model, (&'static str, String)> {
        let st = &self.state;
        let wrap = |key: &'static str| move |e: radner_core::Error| (key, e.to_string());
        let drift = DriftFn::parse(&st.drift, st.dim).map_err(wrap("drift"))?;
        let diffusion = DiffusionFn::parse(&st.diffusion).map_err(wrap("diffusion"))?;
        let dyn_ = StateDynamics::new(st.dim, drift, diffusion, st.k, st.x0.clone()).map_err(wrap("x0"))?;
        if self.agents.is_empty() {
            return Err(("agents", "at least one [[agents]] entry is required".into()));
        }
        let mut agents = Vec::new();
        for a in &self.agents {
            let e = ScalarFn::parse(&a.endowment).map_err(wrap("endowment"))?;
            agents.push(AgentSpec::new(a.alpha, e, a.pi0));
        }
        let econ = Economy::new(agents, st.horizon).map_err(wrap("alpha"))?;
        let total: f64 = self.agents.iter().map(|a| a.pi0).sum();
        if (total - 1.0).abs() > HOLDINGS_TOL {
            return Err(("pi0", format!("initial holdings must sum to 1, got {total}")));
        }
        let g = &self.grid;
        let grid = GridSpec::new(g.t_steps, g.x_min.clone(), g.x_max.clone(), g.x_steps.clone()).map_err(wrap("x_steps"))?;
        if grid.dim() != st.dim {
            return Err(("x_min", format!("grid has dimension {} but state has {}", grid.dim(), st.dim)));
        }
        let sc = &self.scheme;
        let driver = match (sc.driver.as_str(), sc.n, sc.n0) {
            ("full", _, _) => DriverKind::Full,
            ("truncated", Some(n), _) => DriverKind::Truncated { n },
            ("intermediate", Some(n), Some(n0)) => DriverKind::Intermediate { n, n0 },
            ("truncated", None, _) => return Err(("driver", "truncated driver needs N".into())),
            ("intermediate", _, _) => return Err(("driver", "intermediate driver needs N and N0".into())),
            (other, _, _) => return Err(("driver", format!("unknown driver '{other}'"))),
        };
        driver.validate().map_err(wrap("N"))?;
        let scheme = SchemeParams {
            inner_picard: sc.inner_picard,
            inner_iterations: sc.inner_iterations,
            inner_tol: sc.inner_tol,
            blowup: sc.blowup,
        };
        scheme.validate().map_err(wrap("inner_tol"))?;
        let sim = &self.simulation;
        self.ensemble(sim.seed).validate().map_err(wrap("n_paths"))?;
        for f in &self.output.formats {
            if f != "csv" && f != "json" {
                return Err(("formats", format!("unknown output format '{f}'")));
            }
        }
        Ok(Model {
            econ,
            dyn_,
            driver,
            grid,
            scheme,
        })
    }

    pub fn ensemble(&self, seed: u64) -> EnsembleSpec {
        EnsembleSpec::new(self.simulation.n_paths, self.simulation.n_steps, seed)
    }

    pub fn kernel_spec(&self, lambda: f64) -> KernelSpec {
        let o = &self.scheme.oracle;
        KernelSpec {
            lambda,
            beta: o.beta,
            quad: QuadPlan::new(self.state.x0[0], o.half_width, o.x_steps, o.t_steps, o.r_steps),
        }
    }

    pub fn wants(&self, format: &str) -> bool {
        self.output.formats.iter().any(|f| f == format)
    }
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// First line assigning `key`, falling back to the line of its section.
fn line_of_key(text: &str, key: &str) -> Option<usize> {
    text.lines()
        .position(|l| {
            let l = l.trim_start();
            l.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .or_else(|| text.lines().position(|l| l.trim_start().starts_with(&format!("[{key}"))
            || l.trim_start().starts_with(&format!("[[{key}"))))
        .map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
[state]
dim = 1
diffusion = "constant:1.0"
K = 2.0
x0 = [0.0]
T = 1.0

[[agents]]
alpha = 1.0
endowment = "zero"
pi0 = 1.0

[grid]
t_steps = 100
x_min = [-6.0]
x_max = [6.0]
x_steps = [60]
"#;

    #[test]
    fn parses_with_defaults() {
        let c = RunConfig::parse(BASIC, Path::new("c.toml")).unwrap();
        assert_eq!(c.scheme.driver, "full");
        assert_eq!(c.simulation.n_paths, 10_000);
        assert_eq!(c.scheme.oracle.tolerance, 2e-3);
        assert!(c.model().is_ok());
    }

    #[test]
    fn round_trip_is_idempotent() {
        let c = RunConfig::parse(BASIC, Path::new("c.toml")).unwrap();
        let again = RunConfig::parse(&c.to_toml(), Path::new("c.toml")).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.to_toml(), again.to_toml());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = BASIC.replace("K = 2.0", "K = \"two\"");
        let e = RunConfig::parse(&bad, Path::new("c.toml")).unwrap_err();
        assert_eq!(e.line, Some(5), "{e}");
        let bad = BASIC.replace("pi0 = 1.0", "pi0 = 0.7");
        let e = RunConfig::parse(&bad, Path::new("c.toml")).unwrap_err();
        assert_eq!(e.line, Some(12), "{e}");
        assert!(e.to_string().contains("sum to 1"));
        let bad = BASIC.replace("[grid]", "[grid]\nbogus = 1");
        assert!(RunConfig::parse(&bad, Path::new("c.toml")).unwrap_err().line.is_some());
    }
}
