//! Problem primitives: the state diffusion, the agents and their endowments,
//! and the constants derived from them.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance on `Σ κ^i = 1` and on `Σ π^i_0 = 1`.
pub const CONSTANT_TOL: f64 = 1e-12;

/// Relative slack when comparing sampled quantities against the regularity constant.
const REGULARITY_SLACK: f64 = 1e-12;

pub type ValueFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type JetFn = Arc<dyn Fn(f64, &[f64]) -> Jet + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Value of a scalar function of `(t, x)` together with its first time
/// derivative, spatial gradient and (row-major) spatial Hessian.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub dt: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

impl Jet {
    fn zero(value: f64, dim: usize) -> Self {
        Jet {
            value,
            dt: 0.0,
            grad: vec![0.0; dim],
            hess: vec![0.0; dim * dim],
        }
    }
}

/// Parameters of an Ornstein-Uhlenbeck factor
/// `dη = θ(η̄ - η) dt + σ_η dB` that is re-expressed through the bounded
/// state `dξ = e^{-θt} dB, ξ_0 = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuParams {
    pub theta: f64,
    pub eta_bar: f64,
    pub eta0: f64,
    pub sigma_eta: f64,
}

impl OuParams {
    pub fn new(theta: f64, eta_bar: f64, eta0: f64, sigma_eta: f64) -> Result<Self> {
        let p = OuParams {
            theta,
            eta_bar,
            eta0,
            sigma_eta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "OU mean-reversion speed must be positive, got {}",
                self.theta
            )));
        }
        if !(self.sigma_eta > 0.0 && self.sigma_eta.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "OU volatility must be positive, got {}",
                self.sigma_eta
            )));
        }
        if !self.eta_bar.is_finite() || !self.eta0.is_finite() {
            return Err(Error::InvalidInput("OU levels must be finite".into()));
        }
        Ok(())
    }

    /// η as a function of the transformed state: `η̄ + (η₀-η̄)e^{-θt} + σ_η x`.
    pub fn eta(&self, t: f64, x: f64) -> f64 {
        self.eta_bar + (self.eta0 - self.eta_bar) * (-self.theta * t).exp() + self.sigma_eta * x
    }

    fn deta_dt(&self, t: f64) -> f64 {
        -self.theta * (self.eta0 - self.eta_bar) * (-self.theta * t).exp()
    }
}

/// A scalar function of `(t, x)`, used for endowment rates.
///
/// Built-in variants carry closed-form derivatives. `Custom` functions fall
/// back to central differences unless a jet is registered with
/// [`ScalarFn::with_jet`].
#[derive(Clone)]
pub enum ScalarFn {
    Zero,
    Constant(f64),
    /// `a + b Σ_j x_j`
    Affine { a: f64, b: f64 },
    /// `height · exp(-|x - center·1|² / (2 width²))`
    GaussianBump { center: f64, width: f64, height: f64 },
    /// `base + height · exp(-(η(t,x) - center)² / (2 width²))` with η from [`OuParams::eta`]
    OuIncome {
        ou: OuParams,
        base: f64,
        height: f64,
        center: f64,
        width: f64,
    },
    Custom {
        label: String,
        value: ValueFn,
        jet: Option<JetFn>,
    },
}

impl fmt::Debug for ScalarFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ScalarFn({})", self.key())
    }
}

impl PartialEq for ScalarFn {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

fn parse_params(key: &str, body: &str, expected: usize) -> Result<Vec<f64>> {
    let vals: std::result::Result<Vec<f64>, _> =
        body.split(',').map(|s| s.trim().parse::<f64>()).collect();
    let vals = vals.map_err(|e| Error::InvalidInput(format!("bad number in '{key}': {e}")))?;
    if vals.len() != expected {
        return Err(Error::InvalidInput(format!(
            "'{key}' expects {expected} parameter(s), got {}",
            vals.len()
        )));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite parameter in '{key}'")));
    }
    Ok(vals)
}

impl ScalarFn {
    /// Parses a registry key such as `"constant:0.5"` or `"gaussian_bump:0,1,0.3"`.
    pub fn parse(key: &str) -> Result<Self> {
        let key = key.trim();
        let (name, body) = match key.split_once(':') {
            Some((n, b)) => (n.trim(), Some(b)),
            None => (key, None),
        };
        let f = match (name, body) {
            ("zero", None) => ScalarFn::Zero,
            ("constant", Some(b)) => ScalarFn::Constant(parse_params(key, b, 1)?[0]),
            ("affine", Some(b)) => {
                let p = parse_params(key, b, 2)?;
                ScalarFn::Affine { a: p[0], b: p[1] }
            }
            ("gaussian_bump", Some(b)) => {
                let p = parse_params(key, b, 3)?;
                if p[1] <= 0.0 {
                    return Err(Error::InvalidInput(format!("bump width must be positive in '{key}'")));
                }
                ScalarFn::GaussianBump {
                    center: p[0],
                    width: p[1],
                    height: p[2],
                }
            }
            ("ou_income", Some(b)) => {
                let p = parse_params(key, b, 8)?;
                let ou = OuParams::new(p[0], p[1], p[2], p[3])?;
                if p[7] <= 0.0 {
                    return Err(Error::InvalidInput(format!("income width must be positive in '{key}'")));
                }
                ScalarFn::OuIncome {
                    ou,
                    base: p[4],
                    height: p[5],
                    center: p[6],
                    width: p[7],
                }
            }
            _ => return Err(Error::InvalidInput(format!("unknown function key '{key}'"))),
        };
        Ok(f)
    }

    pub fn custom<F>(label: impl Into<String>, f: F) -> Self
    where
        F: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        ScalarFn::Custom {
            label: label.into(),
            value: Arc::new(f),
            jet: None,
        }
    }

    /// Registers closed-form derivatives for a custom function.
    pub fn with_jet<J>(self, jet: J) -> Self
    where
        J: Fn(f64, &[f64]) -> Jet + Send + Sync + 'static,
    {
        match self {
            ScalarFn::Custom { label, value, .. } => ScalarFn::Custom {
                label,
                value,
                jet: Some(Arc::new(jet)),
            },
            other => other,
        }
    }

    /// Canonical registry key; `parse(f.key())` reproduces built-ins.
    pub fn key(&self) -> String {
        match self {
            ScalarFn::Zero => "zero".into(),
            ScalarFn::Constant(c) => format!("constant:{c}"),
            ScalarFn::Affine { a, b } => format!("affine:{a},{b}"),
            ScalarFn::GaussianBump {
                center,
                width,
                height,
            } => format!("gaussian_bump:{center},{width},{height}"),
            ScalarFn::OuIncome {
                ou,
                base,
                height,
                center,
                width,
            } => format!(
                "ou_income:{},{},{},{},{base},{height},{center},{width}",
                ou.theta, ou.eta_bar, ou.eta0, ou.sigma_eta
            ),
            ScalarFn::Custom { label, .. } => format!("custom:{label}"),
        }
    }

    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            ScalarFn::Zero => 0.0,
            ScalarFn::Constant(c) => *c,
            ScalarFn::Affine { a, b } => a + b * x.iter().sum::<f64>(),
            ScalarFn::GaussianBump {
                center,
                width,
                height,
            } => {
                let r2: f64 = x.iter().map(|xi| (xi - center).powi(2)).sum();
                height * (-r2 / (2.0 * width * width)).exp()
            }
            ScalarFn::OuIncome {
                ou,
                base,
                height,
                center,
                width,
            } => {
                let u = ou.eta(t, x[0]) - center;
                base + height * (-u * u / (2.0 * width * width)).exp()
            }
            ScalarFn::Custom { value, .. } => value(t, x),
        }
    }

    /// Value and derivatives at `(t, x)`; closed form where available,
    /// central differences with spacing `1e-5·(1+|·|)` otherwise.
    pub fn jet(&self, t: f64, x: &[f64]) -> Result<Jet> {
        let d = x.len();
        let jet = match self {
            ScalarFn::Zero | ScalarFn::Constant(_) => Jet::zero(self.value(t, x), d),
            ScalarFn::Affine { b, .. } => {
                let mut j = Jet::zero(self.value(t, x), d);
                j.grad.iter_mut().for_each(|g| *g = *b);
                j
            }
            ScalarFn::GaussianBump {
                center,
                width,
                ..
            } => {
                let g = self.value(t, x);
                let w2 = width * width;
                let mut j = Jet::zero(g, d);
                for a in 0..d {
                    j.grad[a] = -(x[a] - center) / w2 * g;
                    for b in 0..d {
                        let delta = if a == b { 1.0 } else { 0.0 };
                        j.hess[a * d + b] =
                            ((x[a] - center) * (x[b] - center) / (w2 * w2) - delta / w2) * g;
                    }
                }
                j
            }
            ScalarFn::OuIncome {
                ou,
                base,
                center,
                width,
                ..
            } => {
                let value = self.value(t, x);
                let bump = value - base;
                let w2 = width * width;
                let u = ou.eta(t, x[0]) - center;
                let g1 = -u / w2 * bump;
                let g2 = (u * u / (w2 * w2) - 1.0 / w2) * bump;
                let mut j = Jet::zero(value, d);
                j.dt = g1 * ou.deta_dt(t);
                j.grad[0] = g1 * ou.sigma_eta;
                j.hess[0] = g2 * ou.sigma_eta * ou.sigma_eta;
                j
            }
            ScalarFn::Custom { jet: Some(jf), .. } => jf(t, x),
            ScalarFn::Custom { value, .. } => finite_difference_jet(value.as_ref(), t, x),
        };
        check_jet(&jet, t, x)?;
        Ok(jet)
    }
}

fn check_jet(jet: &Jet, t: f64, x: &[f64]) -> Result<()> {
    let finite = jet.value.is_finite()
        && jet.dt.is_finite()
        && jet.grad.iter().all(|v| v.is_finite())
        && jet.hess.iter().all(|v| v.is_finite());
    if finite {
        Ok(())
    } else {
        Err(Error::SingularEndowment {
            t,
            x: x.to_vec(),
            what: "non-finite value or difference quotient".into(),
        })
    }
}

fn finite_difference_jet(f: &(dyn Fn(f64, &[f64]) -> f64 + Send + Sync), t: f64, x: &[f64]) -> Jet {
    let d = x.len();
    let f0 = f(t, x);
    let ht = 1e-5 * (1.0 + t.abs());
    let dt = (f(t + ht, x) - f(t - ht, x)) / (2.0 * ht);
    let h: Vec<f64> = x.iter().map(|xi| 1e-5 * (1.0 + xi.abs())).collect();
    let mut xp = x.to_vec();
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    for a in 0..d {
        xp[a] = x[a] + h[a];
        let fp = f(t, &xp);
        xp[a] = x[a] - h[a];
        let fm = f(t, &xp);
        xp[a] = x[a];
        grad[a] = (fp - fm) / (2.0 * h[a]);
        hess[a * d + a] = (fp - 2.0 * f0 + fm) / (h[a] * h[a]);
        for b in (a + 1)..d {
            let mut eval = |sa: f64, sb: f64| {
                xp[a] = x[a] + sa * h[a];
                xp[b] = x[b] + sb * h[b];
                let v = f(t, &xp);
                xp[a] = x[a];
                xp[b] = x[b];
                v
            };
            let m = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                / (4.0 * h[a] * h[b]);
            hess[a * d + b] = m;
            hess[b * d + a] = m;
        }
    }
    Jet {
        value: f0,
        dt,
        grad,
        hess,
    }
}

/// Drift `Λ(t, x)` of the state process.
#[derive(Clone)]
pub enum DriftFn {
    Zero,
    Constant(Vec<f64>),
    /// `Λ(t, x) = k·x`; unbounded, kept for validation tests.
    Linear(f64),
    Custom { label: String, f: VectorFn },
}

/// Diffusion `Σ(t, x)` of the state process, a d×d matrix.
#[derive(Clone)]
pub enum DiffusionFn {
    /// `λ·I`
    Scalar(f64),
    /// `scale·e^{-θt}·I`
    ExpDecay { scale: f64, theta: f64 },
    /// Row-major d×d output.
    Custom { label: String, f: VectorFn },
}

impl DriftFn {
    pub fn parse(key: &str, dim: usize) -> Result<Self> {
        let key = key.trim();
        match key.split_once(':') {
            None if key == "zero" => Ok(DriftFn::Zero),
            Some(("constant", b)) => Ok(DriftFn::Constant(vec![parse_params(key, b, 1)?[0]; dim])),
            Some(("linear", b)) => Ok(DriftFn::Linear(parse_params(key, b, 1)?[0])),
            _ => Err(Error::InvalidInput(format!("unknown drift key '{key}'"))),
        }
    }

    pub fn key(&self) -> String {
        match self {
            DriftFn::Zero => "zero".into(),
            DriftFn::Constant(v) => format!("constant:{}", v.first().copied().unwrap_or(0.0)),
            DriftFn::Linear(k) => format!("linear:{k}"),
            DriftFn::Custom { label, .. } => format!("custom:{label}"),
        }
    }

    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            DriftFn::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            DriftFn::Constant(v) => out.copy_from_slice(v),
            DriftFn::Linear(k) => out.iter_mut().zip(x).for_each(|(o, xi)| *o = k * xi),
            DriftFn::Custom { f, .. } => f(t, x, out),
        }
    }
}

impl DiffusionFn {
    pub fn parse(key: &str) -> Result<Self> {
        let key = key.trim();
        match key.split_once(':') {
            None if key == "zero" => Ok(DiffusionFn::Scalar(0.0)),
            Some(("constant", b)) => Ok(DiffusionFn::Scalar(parse_params(key, b, 1)?[0])),
            Some(("exp_decay", b)) => {
                let n = b.split(',').count();
                let p = parse_params(key, b, n.clamp(1, 2))?;
                Ok(DiffusionFn::ExpDecay {
                    theta: p[0],
                    scale: p.get(1).copied().unwrap_or(1.0),
                })
            }
            _ => Err(Error::InvalidInput(format!("unknown diffusion key '{key}'"))),
        }
    }

    pub fn key(&self) -> String {
        match self {
            DiffusionFn::Scalar(l) => format!("constant:{l}"),
            DiffusionFn::ExpDecay { scale, theta } => format!("exp_decay:{theta},{scale}"),
            DiffusionFn::Custom { label, .. } => format!("custom:{label}"),
        }
    }

    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        let diag = |out: &mut [f64], v: f64| {
            out.iter_mut().for_each(|o| *o = 0.0);
            for a in 0..d {
                out[a * d + a] = v;
            }
        };
        match self {
            DiffusionFn::Scalar(l) => diag(out, *l),
            DiffusionFn::ExpDecay { scale, theta } => diag(out, scale * (-theta * t).exp()),
            DiffusionFn::Custom { f, .. } => f(t, x, out),
        }
    }
}

/// The state diffusion `dξ = Λ(t,ξ) dt + Σ(t,ξ) dB`, `ξ_0 = x₀`.
#[derive(Clone)]
pub struct StateDynamics {
    pub dim: usize,
    pub drift: DriftFn,
    pub diffusion: DiffusionFn,
    /// Claimed bound / Lipschitz / ellipticity constant.
    pub regularity_k: f64,
    pub x0: Vec<f64>,
}

impl fmt::Debug for StateDynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StateDynamics")
            .field("dim", &self.dim)
            .field("drift", &self.drift.key())
            .field("diffusion", &self.diffusion.key())
            .field("regularity_k", &self.regularity_k)
            .field("x0", &self.x0)
            .finish()
    }
}

impl StateDynamics {
    pub fn new(
        dim: usize,
        drift: DriftFn,
        diffusion: DiffusionFn,
        regularity_k: f64,
        x0: Vec<f64>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("state dimension must be positive".into()));
        }
        if !(regularity_k > 0.0) {
            return Err(Error::InvalidInput(format!(
                "regularity constant K must be positive, got {regularity_k}"
            )));
        }
        if x0.len() != dim {
            return Err(Error::InvalidInput(format!(
                "initial state has length {} but dim = {dim}",
                x0.len()
            )));
        }
        if let DriftFn::Constant(v) = &drift {
            if v.len() != dim {
                return Err(Error::InvalidInput("constant drift length differs from dim".into()));
            }
        }
        Ok(StateDynamics {
            dim,
            drift,
            diffusion,
            regularity_k,
            x0,
        })
    }

    pub fn drift_at(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.drift.eval(t, x, out)
    }

    pub fn diffusion_at(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.diffusion.eval(t, x, out)
    }

    /// `Some(λ)` when `Λ ≡ 0` and `Σ ≡ λ·I`, the case where the transition
    /// density is exactly the scaled heat kernel.
    pub fn constant_coefficient_scale(&self) -> Option<f64> {
        match (&self.drift, &self.diffusion) {
            (DriftFn::Zero, DiffusionFn::Scalar(l)) if *l > 0.0 => Some(*l),
            (DriftFn::Constant(v), DiffusionFn::Scalar(l)) if *l > 0.0 && v.iter().all(|c| *c == 0.0) => {
                Some(*l)
            }
            _ => None,
        }
    }

    pub fn describe(&self) -> String {
        format!(
            "dim={};drift={};diffusion={};K={};x0={:?}",
            self.dim,
            self.drift.key(),
            self.diffusion.key(),
            self.regularity_k,
            self.x0
        )
    }
}

/// Sampling plan for the regularity checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub t_min: f64,
    pub t_max: f64,
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub n_probes: usize,
    pub seed: u64,
}

impl SamplePlan {
    pub fn new(t_max: f64, x_lo: Vec<f64>, x_hi: Vec<f64>, n_probes: usize, seed: u64) -> Self {
        SamplePlan {
            t_min: 0.0,
            t_max,
            x_lo,
            x_hi,
            n_probes,
            seed,
        }
    }

    fn draw_point(&self, rng: &mut ChaCha8Rng) -> (f64, Vec<f64>) {
        let t = self.t_min + (self.t_max - self.t_min) * rng.random::<f64>();
        let x = self
            .x_lo
            .iter()
            .zip(&self.x_hi)
            .map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
            .collect();
        (t, x)
    }
}

/// Empirical regularity of a [`StateDynamics`] over a [`SamplePlan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub regularity_k: f64,
    pub max_drift: f64,
    pub max_diffusion: f64,
    pub max_drift_lipschitz: f64,
    pub max_diffusion_modulus: f64,
    pub min_ellipticity: f64,
    pub bounded: bool,
    pub lipschitz: bool,
    pub elliptic: bool,
    pub invertible: bool,
    pub probes: usize,
}

impl ValidationReport {
    pub fn pass(&self) -> bool {
        self.bounded && self.lipschitz && self.elliptic && self.invertible
    }
}

/// Probes boundedness, Lipschitz/Hölder moduli and ellipticity of `(Λ, Σ)`.
/// Singular `Σ` is reported through the flags, never as an error.
pub fn validate_state_dynamics(dyn_: &StateDynamics, plan: &SamplePlan) -> Result<ValidationReport> {
    let d = dyn_.dim;
    if plan.x_lo.len() != d || plan.x_hi.len() != d {
        return Err(Error::InvalidInput("sample plan dimension differs from state dimension".into()));
    }
    if plan.n_probes == 0 {
        return Err(Error::InvalidInput("sample plan needs at least one probe".into()));
    }
    let k = dyn_.regularity_k;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut lam = vec![0.0; d];
    let mut lam2 = vec![0.0; d];
    let mut sig = vec![0.0; d * d];
    let mut sig2 = vec![0.0; d * d];
    let mut sz = vec![0.0; d];
    let mut rep = ValidationReport {
        regularity_k: k,
        max_drift: 0.0,
        max_diffusion: 0.0,
        max_drift_lipschitz: 0.0,
        max_diffusion_modulus: 0.0,
        min_ellipticity: f64::INFINITY,
        bounded: true,
        lipschitz: true,
        elliptic: true,
        invertible: true,
        probes: plan.n_probes,
    };
    for _ in 0..plan.n_probes {
        let (t, x) = plan.draw_point(&mut rng);
        let (t2, x2) = plan.draw_point(&mut rng);
        dyn_.drift_at(t, &x, &mut lam);
        dyn_.diffusion_at(t, &x, &mut sig);
        dyn_.drift_at(t, &x2, &mut lam2);
        dyn_.diffusion_at(t2, &x2, &mut sig2);

        rep.max_drift = rep.max_drift.max(linalg::norm(&lam));
        rep.max_diffusion = rep.max_diffusion.max(linalg::operator_norm(&sig, d));
        let dx = linalg::distance(&x, &x2);
        if dx > 0.0 {
            let dl: Vec<f64> = lam.iter().zip(&lam2).map(|(a, b)| a - b).collect();
            rep.max_drift_lipschitz = rep.max_drift_lipschitz.max(linalg::norm(&dl) / dx);
        }
        let denom = (t - t2).abs().sqrt() + dx;
        if denom > 0.0 {
            let ds: Vec<f64> = sig.iter().zip(&sig2).map(|(a, b)| a - b).collect();
            rep.max_diffusion_modulus = rep.max_diffusion_modulus.max(linalg::operator_norm(&ds, d) / denom);
        }

        // unit directions: coordinate axes plus one random direction
        let mut dirs: Vec<Vec<f64>> = (0..d)
            .map(|a| (0..d).map(|b| if a == b { 1.0 } else { 0.0 }).collect())
            .collect();
        let mut z: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
        let zn = linalg::norm(&z);
        if zn > 0.0 {
            z.iter_mut().for_each(|v| *v /= zn);
            dirs.push(z);
        }
        for z in &dirs {
            linalg::mat_vec(&sig, z, d, &mut sz);
            rep.min_ellipticity = rep.min_ellipticity.min(linalg::norm(&sz));
        }
        if linalg::determinant(&sig, d).abs() == 0.0 {
            rep.invertible = false;
        }
    }
    let tol = 1.0 + REGULARITY_SLACK;
    rep.bounded = rep.max_drift <= k * tol && rep.max_diffusion <= k * tol;
    rep.lipschitz = rep.max_drift_lipschitz <= k * tol && rep.max_diffusion_modulus <= k * tol;
    rep.elliptic = rep.min_ellipticity * tol >= 1.0 / k;
    if rep.min_ellipticity == 0.0 {
        rep.invertible = false;
    }
    Ok(rep)
}

/// One economic agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub risk_aversion: f64,
    pub endowment: ScalarFn,
    pub initial_holding: f64,
}

impl AgentSpec {
    pub fn new(risk_aversion: f64, endowment: ScalarFn, initial_holding: f64) -> Self {
        AgentSpec {
            risk_aversion,
            endowment,
            initial_holding,
        }
    }
}

/// `1/ba = Σ 1/α^i`, `κ^i = ba/α^i`.
pub fn derived_constants(alphas: &[f64]) -> Result<(f64, Vec<f64>)> {
    if alphas.is_empty() {
        return Err(Error::InvalidInput("at least one agent is required".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(Error::InvalidInput(format!(
            "risk aversion must be positive and finite, got {a}"
        )));
    }
    let inv_sum: f64 = alphas.iter().map(|a| 1.0 / a).sum();
    let ba = 1.0 / inv_sum;
    let kappas = alphas.iter().map(|a| ba / a).collect();
    Ok((ba, kappas))
}

/// The agents, the derived constants and the horizon.
#[derive(Debug, Clone)]
pub struct Economy {
    pub agents: Vec<AgentSpec>,
    pub ba: f64,
    pub kappas: Vec<f64>,
    pub horizon: f64,
}

impl Economy {
    pub fn new(agents: Vec<AgentSpec>, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidInput(format!("horizon must be positive, got {horizon}")));
        }
        let alphas: Vec<f64> = agents.iter().map(|a| a.risk_aversion).collect();
        let (ba, kappas) = derived_constants(&alphas)?;
        Ok(Economy {
            agents,
            ba,
            kappas,
            horizon,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    /// Number of BSDE components, `I + 1`.
    pub fn components(&self) -> usize {
        self.agents.len() + 1
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.agents.iter().map(|a| a.risk_aversion).collect()
    }

    /// Writes `e^i(t, x)` for every agent.
    pub fn endowments(&self, t: f64, x: &[f64], out: &mut [f64]) {
        for (o, a) in out.iter_mut().zip(&self.agents) {
            *o = a.endowment.value(t, x);
        }
    }

    pub fn aggregate_endowment(&self, t: f64, x: &[f64]) -> f64 {
        self.agents.iter().map(|a| a.endowment.value(t, x)).sum()
    }

    /// Terminal condition `g = (0, α^1 e^1(T,x), …, α^I e^I(T,x))`.
    pub fn terminal(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        for (i, a) in self.agents.iter().enumerate() {
            out[i + 1] = a.risk_aversion * a.endowment.value(self.horizon, x);
        }
    }

    /// Rejects economies whose initial holdings do not sum to the one share in supply.
    pub fn check_initial_holdings(&self) -> Result<()> {
        let s: f64 = self.agents.iter().map(|a| a.initial_holding).sum();
        if (s - 1.0).abs() > CONSTANT_TOL {
            return Err(Error::InvalidInput(format!(
                "initial holdings must sum to 1, got {s}"
            )));
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        let agents: Vec<String> = self
            .agents
            .iter()
            .map(|a| format!("({},{},{})", a.risk_aversion, a.endowment.key(), a.initial_holding))
            .collect();
        format!("T={};agents=[{}]", self.horizon, agents.join(","))
    }
}

/// Builds the bounded state `dξ = e^{-θt} dB, ξ_0 = 0` and the transformed
/// endowment `f(t, x) = e(t, η̄ + (η₀-η̄)e^{-θt} + σ_η x)`, so that
/// `f(t, ξ_t)` has the law of `e(t, η_t)` for the OU factor `η`.
pub fn ou_transform<E>(ou: OuParams, horizon: f64, endow: E) -> Result<(StateDynamics, ScalarFn)>
where
    E: Fn(f64, f64) -> f64 + Send + Sync + 'static,
{
    ou.validate()?;
    if !(horizon > 0.0) {
        return Err(Error::InvalidInput("horizon must be positive".into()));
    }
    let k = (ou.theta * horizon).exp().max(1.0);
    let dyn_ = StateDynamics::new(
        1,
        DriftFn::Zero,
        DiffusionFn::ExpDecay {
            scale: 1.0,
            theta: ou.theta,
        },
        k,
        vec![0.0],
    )?;
    let label = format!(
        "ou_transform({},{},{},{})",
        ou.theta, ou.eta_bar, ou.eta0, ou.sigma_eta
    );
    let f = ScalarFn::custom(label, move |t, x| endow(t, ou.eta(t, x[0])));
    Ok((dyn_, f))
}

/// Itô decomposition of the aggregate endowment:
/// `μₑ = ∂_t e + 𝒜e`, `σₑ = (De)·Σ`.
#[derive(Debug, Clone, Copy)]
pub struct EndowmentDecomposition<'a> {
    econ: &'a Economy,
    dyn_: &'a StateDynamics,
}

pub fn endowment_decomposition<'a>(econ: &'a Economy, dyn_: &'a StateDynamics) -> EndowmentDecomposition<'a> {
    EndowmentDecomposition { econ, dyn_ }
}

impl<'a> EndowmentDecomposition<'a> {
    /// `(μₑ(t,x), σₑ(t,x))`.
    pub fn at(&self, t: f64, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let d = self.dyn_.dim;
        let mut dt = 0.0;
        let mut grad = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        for a in &self.econ.agents {
            let j = a.endowment.jet(t, x)?;
            dt += j.dt;
            grad.iter_mut().zip(&j.grad).for_each(|(g, v)| *g += v);
            hess.iter_mut().zip(&j.hess).for_each(|(h, v)| *h += v);
        }
        let mut lam = vec![0.0; d];
        let mut sig = vec![0.0; d * d];
        self.dyn_.drift_at(t, x, &mut lam);
        self.dyn_.diffusion_at(t, x, &mut sig);
        let mu = dt + generator_from_derivatives(&grad, &hess, &lam, &sig, d);
        let mut sigma_e = vec![0.0; d];
        linalg::row_times_mat(&grad, &sig, d, &mut sigma_e);
        if !mu.is_finite() || sigma_e.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularEndowment {
                t,
                x: x.to_vec(),
                what: "non-finite Itô coefficient".into(),
            });
        }
        Ok((mu, sigma_e))
    }

    pub fn mu_e(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.at(t, x)?.0)
    }
}

/// `Du·Λ + ½ Tr(D²u ΣΣᵀ)` from the derivatives of `u`.
pub fn generator_from_derivatives(grad: &[f64], hess: &[f64], drift: &[f64], sig: &[f64], d: usize) -> f64 {
    let mut out: f64 = grad.iter().zip(drift).map(|(g, l)| g * l).sum();
    for a in 0..d {
        for b in 0..d {
            let ss: f64 = (0..d).map(|k| sig[a * d + k] * sig[b * d + k]).sum();
            out += 0.5 * hess[a * d + b] * ss;
        }
    }
    out
}

/// Sampled bounds and terminal Hölder moduli of the individual endowments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndowmentReport {
    pub declared_bound: f64,
    pub sup_per_agent: Vec<f64>,
    pub holder_exponent: f64,
    pub max_terminal_holder_quotient: Vec<f64>,
    pub bounded: bool,
}

/// Checks `|e^i| ≤ M_e` on the probe set and reports the terminal-slice
/// Hölder quotients `|e^i(T,x)-e^i(T,x')| / |x-x'|^exponent`.
pub fn validate_endowments(
    econ: &Economy,
    plan: &SamplePlan,
    declared_bound: f64,
    holder_exponent: f64,
) -> Result<EndowmentReport> {
    if !(holder_exponent > 0.0 && holder_exponent <= 1.0) {
        return Err(Error::InvalidInput("Hölder exponent must lie in (0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let n = econ.n_agents();
    let mut sup = vec![0.0f64; n];
    let mut hq = vec![0.0f64; n];
    for _ in 0..plan.n_probes {
        let (t, x) = plan.draw_point(&mut rng);
        let (_, x2) = plan.draw_point(&mut rng);
        let dx = linalg::distance(&x, &x2);
        for (i, a) in econ.agents.iter().enumerate() {
            sup[i] = sup[i].max(a.endowment.value(t, &x).abs());
            if dx > 0.0 {
                let diff = (a.endowment.value(econ.horizon, &x) - a.endowment.value(econ.horizon, &x2)).abs();
                hq[i] = hq[i].max(diff / dx.powf(holder_exponent));
            }
        }
    }
    let bounded = sup.iter().all(|s| *s <= declared_bound);
    Ok(EndowmentReport {
        declared_bound,
        sup_per_agent: sup,
        holder_exponent,
        max_terminal_holder_quotient: hq,
        bounded,
    })
}
