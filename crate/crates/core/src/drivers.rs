//! The equilibrium driver, its truncated variants, and the bounded plus
//! upper-triangular split of the truncated driver.
//!
//! Row 0 is the annuity component `a` (with `z⁰ = σ`); rows `1..=I` are
//! the agents' `Y^i` (with `z^i = Z^i`). `z` is stored row-major as an
//! `(I+1)×d` matrix. All values are dt-coefficients: `dY = f dt + Z dB`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{endowment_decomposition, Economy, SamplePlan, StateDynamics};

/// Bound on the argument of `exp(-y⁰)`; evaluations beyond it are clamped and counted.
pub const EXP_ARG_LIMIT: f64 = 700.0;

/// Agreement required between `f1 + f2` and the driver.
pub const SPLIT_TOL: f64 = 1e-12;

/// `exp(-y0)` with `-y0` clamped to `[-700, 700]`; the flag reports a clamp.
#[inline]
pub fn guarded_exp_neg(y0: f64) -> (f64, bool) {
    let arg = -y0;
    if arg > EXP_ARG_LIMIT {
        (EXP_ARG_LIMIT.exp(), true)
    } else if arg < -EXP_ARG_LIMIT {
        ((-EXP_ARG_LIMIT).exp(), true)
    } else {
        (arg.exp(), false)
    }
}

/// `ι_N(x) = max(min(x, N), -N)`
#[inline]
pub fn iota(n: f64, x: f64) -> f64 {
    x.min(n).max(-n)
}

/// `q_N(z) = |z|·ι_N(|z|)`; equals `|z|²` for `|z| ≤ N` and `N|z|` beyond.
#[inline]
pub fn q_n(n: f64, z: &[f64]) -> f64 {
    let r = linalg::norm(z);
    r * iota(n, r)
}

/// The pair `(ι_N, q_N)` as closures.
pub fn truncation_pair(n: f64) -> Result<(impl Fn(f64) -> f64, impl Fn(&[f64]) -> f64)> {
    if !(n > 0.0) {
        return Err(Error::InvalidInput(format!("truncation level must be positive, got {n}")));
    }
    Ok((move |x| iota(n, x), move |z: &[f64]| q_n(n, z)))
}

/// Truncation levels: `n` for the quadratic terms, optional `n0 ≤ n` for the
/// `y`-clamps of the intermediate system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationLevel {
    pub n: f64,
    pub n0: Option<f64>,
}

impl TruncationLevel {
    pub fn new(n: f64) -> Result<Self> {
        let l = TruncationLevel { n, n0: None };
        l.validate()?;
        Ok(l)
    }

    pub fn with_inner(n: f64, n0: f64) -> Result<Self> {
        let l = TruncationLevel { n, n0: Some(n0) };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n > 0.0) {
            return Err(Error::InvalidInput(format!("N must be positive, got {}", self.n)));
        }
        if let Some(n0) = self.n0 {
            if !(n0 > 0.0 && n0 <= self.n) {
                return Err(Error::InvalidInput(format!(
                    "inner level must satisfy 0 < N0 <= N, got N0={n0}, N={}",
                    self.n
                )));
            }
        }
        Ok(())
    }
}

/// Which of the three drivers to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriverKind {
    Full,
    /// `q_N` on every `|z^l|²`, `ι_N` on `a` and `Y^i`, `ι_N` on the terminal values.
    Truncated { n: f64 },
    /// `q_N` on the quadratic terms, `ι_{N0}` on `a` and `Y^i`.
    Intermediate { n: f64, n0: f64 },
}

impl DriverKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DriverKind::Full => Ok(()),
            DriverKind::Truncated { n } => TruncationLevel::new(n).map(|_| ()),
            // the ordering N0 <= N belongs to TruncationLevel; the formula itself
            // only needs positive levels
            DriverKind::Intermediate { n, n0 } => {
                TruncationLevel::new(n)?;
                TruncationLevel::new(n0).map(|_| ())
            }
        }
    }

    pub fn from_level(level: TruncationLevel) -> Self {
        match level.n0 {
            None => DriverKind::Truncated { n: level.n },
            Some(n0) => DriverKind::Intermediate { n: level.n, n0 },
        }
    }

    fn y_clamp(&self) -> Option<f64> {
        match *self {
            DriverKind::Full => None,
            DriverKind::Truncated { n } => Some(n),
            DriverKind::Intermediate { n0, .. } => Some(n0),
        }
    }

    fn z_clamp(&self) -> Option<f64> {
        match *self {
            DriverKind::Full => None,
            DriverKind::Truncated { n } | DriverKind::Intermediate { n, .. } => Some(n),
        }
    }

    /// Clamp applied to the terminal values `g^i`.
    pub fn terminal_clamp(&self) -> Option<f64> {
        match *self {
            DriverKind::Truncated { n } => Some(n),
            _ => None,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            DriverKind::Full => "full".into(),
            DriverKind::Truncated { n } => format!("truncated(N={n})"),
            DriverKind::Intermediate { n, n0 } => format!("intermediate(N={n},N0={n0})"),
        }
    }
}

/// Arguments `(t, x, y, z)` of the driver.
#[derive(Debug, Clone, Copy)]
pub struct DriverInput<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
}

impl<'a> DriverInput<'a> {
    fn check(&self, econ: &Economy) -> Result<()> {
        let j = econ.components();
        let d = self.x.len();
        if self.y.len() != j || self.z.len() != j * d {
            return Err(Error::InvalidInput(format!(
                "driver input dimensions: y has {}, z has {} entries; expected {j} and {}",
                self.y.len(),
                self.z.len(),
                j * d
            )));
        }
        let finite = self.t.is_finite()
            && self.x.iter().chain(self.y).chain(self.z).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("driver input has non-finite entries".into()));
        }
        Ok(())
    }
}

/// Model data at a single `(t, x)`: `μₑ(t,x)` and `e^i(t,x)`.
#[derive(Debug, Clone, Copy)]
pub struct PointData<'a> {
    pub mu_e: f64,
    pub endowments: &'a [f64],
}

/// A driver bound to an economy.
#[derive(Debug, Clone)]
pub struct Driver<'a> {
    econ: &'a Economy,
    kind: DriverKind,
}

impl<'a> Driver<'a> {
    pub fn new(econ: &'a Economy, kind: DriverKind) -> Result<Self> {
        kind.validate()?;
        Ok(Driver { econ, kind })
    }

    pub fn kind(&self) -> DriverKind {
        self.kind
    }

    pub fn economy(&self) -> &'a Economy {
        self.econ
    }

    pub fn components(&self) -> usize {
        self.econ.components()
    }

    #[inline]
    fn clamp_y(&self, v: f64) -> f64 {
        match self.kind.y_clamp() {
            Some(n) => iota(n, v),
            None => v,
        }
    }

    #[inline]
    fn quadratic(&self, z: &[f64]) -> f64 {
        match self.kind.z_clamp() {
            Some(n) => q_n(n, z),
            None => z.iter().map(|v| v * v).sum(),
        }
    }

    /// Writes the bounded part `f1` and quadratic part `f2` of the driver
    /// (so that `f = f1 + f2`). Returns `true` if `exp(-a)` was clamped.
    pub fn split_point(&self, p: &PointData, y: &[f64], z: &[f64], d: usize, f1: &mut [f64], f2: &mut [f64]) -> bool {
        let a = self.clamp_y(y[0]);
        let (ea, clamped) = guarded_exp_neg(a);
        let mut agg = 0.0;
        for (i, agent) in self.econ.agents.iter().enumerate() {
            let row = i + 1;
            let q = self.quadratic(&z[row * d..(row + 1) * d]);
            agg += self.econ.kappas[i] * q;
            f1[row] = ea * (1.0 + a + self.clamp_y(y[row]) - agent.risk_aversion * p.endowments[i]);
            f2[row] = 0.5 * q;
        }
        f1[0] = self.econ.ba * p.mu_e - ea;
        f2[0] = -0.5 * agg;
        clamped
    }

    /// Writes `f(t, x, y, z)` into `out`. Returns `true` if `exp(-a)` was clamped.
    #[inline]
    pub fn eval_point(&self, p: &PointData, y: &[f64], z: &[f64], d: usize, out: &mut [f64]) -> bool {
        let a = self.clamp_y(y[0]);
        let (ea, clamped) = guarded_exp_neg(a);
        let mut agg = 0.0;
        for (i, agent) in self.econ.agents.iter().enumerate() {
            let row = i + 1;
            let q = self.quadratic(&z[row * d..(row + 1) * d]);
            agg += self.econ.kappas[i] * q;
            out[row] = 0.5 * q + ea * (1.0 + a + self.clamp_y(y[row]) - agent.risk_aversion * p.endowments[i]);
        }
        out[0] = self.econ.ba * p.mu_e - 0.5 * agg - ea;
        clamped
    }

    /// Evaluates the driver, computing `e^i` and `μₑ` from the model.
    pub fn eval(&self, dyn_: &StateDynamics, inp: &DriverInput) -> Result<Vec<f64>> {
        inp.check(self.econ)?;
        let mut endow = vec![0.0; self.econ.n_agents()];
        self.econ.endowments(inp.t, inp.x, &mut endow);
        let mu_e = endowment_decomposition(self.econ, dyn_).mu_e(inp.t, inp.x)?;
        let p = PointData {
            mu_e,
            endowments: &endow,
        };
        let mut out = vec![0.0; self.components()];
        if self.eval_point(&p, inp.y, inp.z, inp.x.len(), &mut out) {
            return Err(Error::DriverOverflow {
                t: inp.t,
                x: inp.x.to_vec(),
                y0: inp.y[0],
            });
        }
        Ok(out)
    }
}

/// `f⁰ = ba μₑ − ½Σκ^l|z^l|² − e^{−y⁰}`, `f^i = ½|z^i|² + e^{−y⁰}(1 + y⁰ + y^i − α^i e^i)`.
pub fn driver_full(econ: &Economy, dyn_: &StateDynamics, inp: &DriverInput) -> Result<Vec<f64>> {
    Driver::new(econ, DriverKind::Full)?.eval(dyn_, inp)
}

pub fn driver_truncated(econ: &Economy, dyn_: &StateDynamics, level: TruncationLevel, inp: &DriverInput) -> Result<Vec<f64>> {
    level.validate()?;
    Driver::new(econ, DriverKind::Truncated { n: level.n })?.eval(dyn_, inp)
}

pub fn driver_intermediate(
    econ: &Economy,
    dyn_: &StateDynamics,
    level: TruncationLevel,
    inp: &DriverInput,
) -> Result<Vec<f64>> {
    let n0 = level
        .n0
        .ok_or_else(|| Error::InvalidInput("intermediate driver needs an inner level N0".into()))?;
    Driver::new(econ, DriverKind::Intermediate { n: level.n, n0 })?.eval(dyn_, inp)
}

/// Sup-norm bounds of the model data, the "universal" inputs to the
/// a-priori constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EconomyBounds {
    pub mu_e_sup: f64,
    pub endowment_sup: Vec<f64>,
}

impl EconomyBounds {
    /// Sampled sup-norms of `μₑ` and `e^i` over the plan (terminal slice included).
    pub fn sample(econ: &Economy, dyn_: &StateDynamics, plan: &SamplePlan) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(plan.seed);
        let dec = endowment_decomposition(econ, dyn_);
        let mut mu_sup = 0.0f64;
        let mut e_sup = vec![0.0f64; econ.n_agents()];
        let mut endow = vec![0.0; econ.n_agents()];
        for k in 0..plan.n_probes {
            let t = if k % 8 == 0 {
                econ.horizon
            } else {
                plan.t_min + (plan.t_max - plan.t_min) * rng.random::<f64>()
            };
            let x: Vec<f64> = plan
                .x_lo
                .iter()
                .zip(&plan.x_hi)
                .map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
                .collect();
            mu_sup = mu_sup.max(dec.mu_e(t, &x)?.abs());
            econ.endowments(t, &x, &mut endow);
            e_sup.iter_mut().zip(&endow).for_each(|(s, e)| *s = s.max(e.abs()));
        }
        Ok(EconomyBounds {
            mu_e_sup: mu_sup,
            endowment_sup: e_sup,
        })
    }

    /// `max_i α^i ‖e^i‖∞`
    pub fn max_scaled_endowment(&self, econ: &Economy) -> f64 {
        econ.agents
            .iter()
            .zip(&self.endowment_sup)
            .map(|(a, s)| a.risk_aversion * s)
            .fold(0.0, f64::max)
    }
}

/// Global Lipschitz constant of the truncated driver, with respect to
/// `Σ_i |Δy^i| + Σ_l |Δz^l|` and the sup-norm on the output.
pub fn truncated_lipschitz_constant(econ: &Economy, bounds: &EconomyBounds, n: f64) -> f64 {
    let en = n.exp();
    let row_a = en * (2.0 * n + bounds.max_scaled_endowment(econ));
    // q_N has slope up to 2N, halved in the driver
    row_a.max(en).max(n)
}

/// The constant `C = ba‖μₑ‖∞ + e^{N0}(1 + 2N0 + max α^i‖e^i‖∞ + 1)` of the split certificate.
pub fn bf_constant(econ: &Economy, bounds: &EconomyBounds, n0: f64) -> f64 {
    econ.ba * bounds.mu_e_sup + n0.exp() * (1.0 + 2.0 * n0 + bounds.max_scaled_endowment(econ) + 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub constant: f64,
    /// `|f1^i| ≤ C` per row.
    pub f1_within: Vec<bool>,
    /// `|f2^i| ≤ C(1 + Σ_{j ⪯ i}|z^j|²)` per row, rows ordered `1, …, I, 0`.
    pub f2_within: Vec<bool>,
}

impl BoundsReport {
    pub fn holds(&self) -> bool {
        self.f1_within.iter().chain(&self.f2_within).all(|b| *b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BfSplit {
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    pub report: BoundsReport,
}

/// Splits the intermediate driver into a bounded part and a part whose
/// quadratic dependence is upper triangular: row `i ≥ 1` uses only `z^i`,
/// and the annuity row aggregates every `z^l`, so it is certified last.
pub fn bf_split(
    econ: &Economy,
    dyn_: &StateDynamics,
    level: TruncationLevel,
    bounds: &EconomyBounds,
    inp: &DriverInput,
) -> Result<BfSplit> {
    inp.check(econ)?;
    let n0 = level
        .n0
        .ok_or_else(|| Error::InvalidInput("split needs an inner level N0".into()))?;
    let drv = Driver::new(econ, DriverKind::Intermediate { n: level.n, n0 })?;
    let j = econ.components();
    let d = inp.x.len();
    let mut endow = vec![0.0; econ.n_agents()];
    econ.endowments(inp.t, inp.x, &mut endow);
    let mu_e = endowment_decomposition(econ, dyn_).mu_e(inp.t, inp.x)?;
    let p = PointData {
        mu_e,
        endowments: &endow,
    };
    let mut f1 = vec![0.0; j];
    let mut f2 = vec![0.0; j];
    let mut f = vec![0.0; j];
    drv.split_point(&p, inp.y, inp.z, d, &mut f1, &mut f2);
    drv.eval_point(&p, inp.y, inp.z, d, &mut f);
    for row in 0..j {
        let diff = (f1[row] + f2[row] - f[row]).abs();
        if diff > SPLIT_TOL * (1.0 + f[row].abs()) {
            return Err(Error::SplitInconsistency { row, diff });
        }
    }
    let c = bf_constant(econ, bounds, n0);
    let zsq: Vec<f64> = (0..j)
        .map(|r| inp.z[r * d..(r + 1) * d].iter().map(|v| v * v).sum())
        .collect();
    let f1_within = f1.iter().map(|v| v.abs() <= c).collect();
    let mut f2_within = vec![false; j];
    let mut partial = 0.0;
    for row in 1..j {
        partial += zsq[row];
        f2_within[row] = f2[row].abs() <= c * (1.0 + partial);
    }
    f2_within[0] = f2[0].abs() <= c * (1.0 + partial + zsq[0]);
    Ok(BfSplit {
        f1,
        f2,
        report: BoundsReport {
            constant: c,
            f1_within,
            f2_within,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AgentSpec, DiffusionFn, DriftFn, ScalarFn};
    use approx::assert_relative_eq;

    fn dyn1() -> StateDynamics {
        StateDynamics::new(1, DriftFn::Zero, DiffusionFn::Scalar(1.0), 1.0, vec![0.0]).unwrap()
    }

    fn dyn2() -> StateDynamics {
        StateDynamics::new(2, DriftFn::Zero, DiffusionFn::Scalar(1.0), 1.0, vec![0.0, 0.0]).unwrap()
    }

    fn single(alpha: f64, e: ScalarFn) -> Economy {
        Economy::new(vec![AgentSpec::new(alpha, e, 1.0)], 1.0).unwrap()
    }

    fn input<'a>(x: &'a [f64], y: &'a [f64], z: &'a [f64]) -> DriverInput<'a> {
        DriverInput { t: 0.5, x, y, z }
    }

    #[test]
    fn truncation_pair_examples() {
        let (iota3, _) = truncation_pair(3.0).unwrap();
        assert_eq!(iota3(5.0), 3.0);
        assert_eq!(iota3(-5.0), -3.0);
        assert_eq!(iota3(1.0), 1.0);
        let (_, q10) = truncation_pair(10.0).unwrap();
        assert_relative_eq!(q10(&[3.0, 4.0]), 25.0, epsilon = 1e-13);
        let (_, q2) = truncation_pair(2.0).unwrap();
        assert_relative_eq!(q2(&[3.0, 4.0]), 10.0, epsilon = 1e-13);
        assert!(truncation_pair(0.0).is_err());
    }

    #[test]
    fn full_driver_examples() {
        let econ = single(1.0, ScalarFn::Zero);
        let f = driver_full(&econ, &dyn1(), &input(&[0.0], &[0.0, 0.0], &[0.0, 0.0])).unwrap();
        assert_eq!(f, vec![-1.0, 1.0]);

        let f = driver_full(&econ, &dyn2(), &input(&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0, 2.0, 0.0])).unwrap();
        assert_relative_eq!(f[0], -3.0, epsilon = 1e-15);
        assert_relative_eq!(f[1], 3.0, epsilon = 1e-15);

        let econ = single(2.0, ScalarFn::Constant(1.0));
        let f = driver_full(&econ, &dyn1(), &input(&[0.0], &[0.0, 0.0], &[0.0, 0.0])).unwrap();
        assert_relative_eq!(f[1], -1.0, epsilon = 1e-15);
    }

    #[test]
    fn overflow_is_reported() {
        let econ = single(1.0, ScalarFn::Zero);
        let err = driver_full(&econ, &dyn1(), &input(&[0.0], &[-800.0, 0.0], &[0.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::DriverOverflow { y0, .. } if y0 == -800.0));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let econ = single(1.0, ScalarFn::Zero);
        assert!(driver_full(&econ, &dyn1(), &input(&[0.0], &[0.0], &[0.0, 0.0])).is_err());
    }

    #[test]
    fn truncated_driver_examples() {
        let econ = single(1.0, ScalarFn::Zero);
        let lvl = TruncationLevel::new(1.0).unwrap();
        let f = driver_truncated(&econ, &dyn1(), lvl, &input(&[0.0], &[-5.0, 0.0], &[0.0, 0.0])).unwrap();
        assert_relative_eq!(f[0], -std::f64::consts::E, epsilon = 1e-14);

        // q_1((2,0)) = 2, so ½q = 1 instead of ½|z|² = 2
        let f = driver_truncated(&econ, &dyn2(), lvl, &input(&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0, 2.0, 0.0])).unwrap();
        assert_relative_eq!(f[0], -1.0 - 1.0, epsilon = 1e-14);
        assert_relative_eq!(f[1], 1.0 + 1.0, epsilon = 1e-14);

        let lvl = TruncationLevel::new(10.0).unwrap();
        let (x, y, z) = ([0.3], [0.2, -0.4], [0.5, -0.7]);
        let a = driver_truncated(&econ, &dyn1(), lvl, &input(&x, &y, &z)).unwrap();
        let b = driver_full(&econ, &dyn1(), &input(&x, &y, &z)).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert_relative_eq!(u, v, epsilon = 1e-14);
        }
    }

    #[test]
    fn intermediate_driver_examples() {
        let econ = single(1.0, ScalarFn::Zero);
        let lvl = TruncationLevel::with_inner(4.0, 1.0).unwrap();
        let f = driver_intermediate(&econ, &dyn1(), lvl, &input(&[0.0], &[-5.0, 0.0], &[0.0, 0.0])).unwrap();
        assert_relative_eq!(f[0], -std::f64::consts::E, epsilon = 1e-14);

        // N=1 truncates the quadratic term, N0=10 leaves y alone
        let lvl = TruncationLevel::with_inner(10.0, 10.0).unwrap();
        let lvl_small_n = TruncationLevel { n: 1.0, n0: Some(10.0) };
        let y = [0.3, -0.2];
        let z = [0.0, 0.0, 2.0, 0.0];
        let drv = Driver::new(&econ, DriverKind::Intermediate { n: lvl_small_n.n, n0: 10.0 }).unwrap();
        let p = PointData { mu_e: 0.0, endowments: &[0.0] };
        let mut f = [0.0; 2];
        drv.eval_point(&p, &y, &z, 2, &mut f);
        let ea = (-0.3f64).exp();
        assert_relative_eq!(f[1], 0.5 * 2.0 + ea * (1.0 + 0.3 - 0.2), epsilon = 1e-14);
        let full = driver_full(&econ, &dyn2(), &input(&[0.0, 0.0], &y, &z)).unwrap();
        let inter = driver_intermediate(&econ, &dyn2(), lvl, &input(&[0.0, 0.0], &y, &z)).unwrap();
        assert_relative_eq!(full[1], inter[1], epsilon = 1e-14);

        assert!(TruncationLevel::with_inner(1.0, 2.0).is_err());
    }

    #[test]
    fn split_examples() {
        let econ = single(1.0, ScalarFn::Zero);
        let bounds = EconomyBounds {
            mu_e_sup: 0.0,
            endowment_sup: vec![0.0],
        };
        let lvl = TruncationLevel::with_inner(5.0, 2.0).unwrap();
        let s = bf_split(&econ, &dyn1(), lvl, &bounds, &input(&[0.0], &[0.0, 0.0], &[0.0, 0.0])).unwrap();
        assert_eq!(s.f1, vec![-1.0, 1.0]);
        assert_eq!(s.f2, vec![0.0, 0.0]);
        assert!(s.report.holds());
    }

    #[test]
    fn split_certificate_needs_the_aggregating_row_last() {
        // Large z¹ with σ = 0: the a-row's quadratic part is -½κ¹q(z¹), far above C(1+|σ|²)
        let econ = single(1.0, ScalarFn::Zero);
        let bounds = EconomyBounds {
            mu_e_sup: 0.0,
            endowment_sup: vec![0.0],
        };
        let lvl = TruncationLevel::with_inner(1000.0, 1.0).unwrap();
        let s = bf_split(&econ, &dyn1(), lvl, &bounds, &input(&[0.0], &[0.0, 0.0], &[0.0, 100.0])).unwrap();
        let c = s.report.constant;
        assert!(s.f2[0].abs() > c);
        assert!(s.report.holds());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn econ2() -> Economy {
            Economy::new(
                vec![
                    AgentSpec::new(1.0, ScalarFn::parse("gaussian_bump:0,1,0.5").unwrap(), 0.4),
                    AgentSpec::new(2.5, ScalarFn::parse("affine:0.2,0.05").unwrap(), 0.6),
                ],
                1.0,
            )
            .unwrap()
        }

        fn bounds2(econ: &Economy) -> EconomyBounds {
            let plan = SamplePlan::new(1.0, vec![-2.0], vec![2.0], 400, 11);
            EconomyBounds::sample(econ, &dyn1(), &plan).unwrap()
        }

        proptest! {
            #[test]
            fn truncations_agree_inside_clamps(
                x in -2.0f64..2.0,
                y in proptest::collection::vec(-2.9f64..2.9, 3),
                z in proptest::collection::vec(-2.0f64..2.0, 3),
            ) {
                let econ = econ2();
                let d = dyn1();
                let inp = DriverInput { t: 0.4, x: &[x], y: &y, z: &z };
                let full = driver_full(&econ, &d, &inp).unwrap();
                let tr = driver_truncated(&econ, &d, TruncationLevel::new(3.0).unwrap(), &inp).unwrap();
                let it = driver_intermediate(&econ, &d, TruncationLevel::with_inner(3.0, 3.0).unwrap(), &inp).unwrap();
                for r in 0..3 {
                    prop_assert!((full[r] - tr[r]).abs() <= 1e-12);
                    prop_assert!((full[r] - it[r]).abs() <= 1e-12);
                }
            }

            #[test]
            fn truncated_lipschitz_certificate(
                x in -2.0f64..2.0,
                y1 in proptest::collection::vec(-8.0f64..8.0, 3),
                z1 in proptest::collection::vec(-8.0f64..8.0, 3),
                dy in proptest::collection::vec(-0.5f64..0.5, 3),
                dz in proptest::collection::vec(-0.5f64..0.5, 3),
            ) {
                let econ = econ2();
                let b = bounds2(&econ);
                let n = 2.0;
                let lip = truncated_lipschitz_constant(&econ, &b, n);
                let d = dyn1();
                let y2: Vec<f64> = y1.iter().zip(&dy).map(|(a, b)| a + b).collect();
                let z2: Vec<f64> = z1.iter().zip(&dz).map(|(a, b)| a + b).collect();
                let lvl = TruncationLevel::new(n).unwrap();
                let f1 = driver_truncated(&econ, &d, lvl, &DriverInput { t: 0.4, x: &[x], y: &y1, z: &z1 }).unwrap();
                let f2 = driver_truncated(&econ, &d, lvl, &DriverInput { t: 0.4, x: &[x], y: &y2, z: &z2 }).unwrap();
                let dist: f64 = dy.iter().map(|v| v.abs()).sum::<f64>() + dz.iter().map(|v| v.abs()).sum::<f64>();
                let df = f1.iter().zip(&f2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                prop_assume!(dist > 0.0);
                prop_assert!(df <= lip * dist * (1.0 + 1e-12), "df={} lip*dist={}", df, lip * dist);
            }

            #[test]
            fn clearing_drift_vanishes_on_the_identity(
                x in -2.0f64..2.0,
                a in -1.0f64..1.0,
                y1 in -2.0f64..2.0,
                s0 in -1.0f64..1.0,
                z1 in -1.0f64..1.0,
            ) {
                // I = 2: choose y² and z² so that F = 0 and its volatility vanishes
                let econ = econ2();
                let d = dyn1();
                let t = 0.3;
                let (mu_e, sigma_e) = endowment_decomposition(&econ, &d).at(t, &[x]).unwrap();
                let e = econ.aggregate_endowment(t, &[x]);
                let k = &econ.kappas;
                let y2 = (econ.ba * e - a - k[0] * y1) / k[1];
                let z2 = (econ.ba * sigma_e[0] - s0 - k[0] * z1) / k[1];
                let y = [a, y1, y2];
                let z = [s0, z1, z2];
                let f = driver_full(&econ, &d, &DriverInput { t, x: &[x], y: &y, z: &z }).unwrap();
                // drift of F = f⁰ + Σκ^i f^i − ba·μₑ must equal e^{−a}·F = 0
                let drift = f[0] + k[0] * f[1] + k[1] * f[2] - econ.ba * mu_e;
                prop_assert!(drift.abs() <= 1e-12 * (1.0 + f.iter().map(|v| v.abs()).sum::<f64>()));
            }

            #[test]
            fn split_reproduces_driver_and_bounds_hold(
                x in -2.0f64..2.0,
                y in proptest::collection::vec(-20.0f64..20.0, 3),
                z in proptest::collection::vec(-20.0f64..20.0, 3),
            ) {
                let econ = econ2();
                let b = bounds2(&econ);
                let lvl = TruncationLevel::with_inner(6.0, 3.0).unwrap();
                let s = bf_split(&econ, &dyn1(), lvl, &b, &DriverInput { t: 0.2, x: &[x], y: &y, z: &z }).unwrap();
                prop_assert!(s.report.holds(), "{:?}", s.report);
            }
        }
    }
}
