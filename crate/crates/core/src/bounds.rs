//! Explicit a-priori constants: the lower bound on `a`, the Gronwall bound
//! on `Y^i`, and the exponential-transform bound on `E[∫|Z^i|²]`.

use serde::{Deserialize, Serialize};

use crate::drivers::EconomyBounds;
use crate::model::Economy;

/// `φ(x) = (e^{2|x|} − 1 − 2|x|)/4`
pub fn phi(x: f64) -> f64 {
    let a = x.abs();
    (2.0 * a).exp_m1() / 4.0 - a / 2.0
}

/// `φ'(x) = sign(x)(e^{2|x|} − 1)/2`
pub fn phi_prime(x: f64) -> f64 {
    x.signum() * (2.0 * x.abs()).exp_m1() / 2.0
}

/// `φ''(x) = e^{2|x|}`, so that `½φ'' − |φ'| = ½`.
pub fn phi_second(x: f64) -> f64 {
    (2.0 * x.abs()).exp()
}

/// Lower bound `a(t,·) ≥ −(T−t)·ba·‖μₑ‖∞`.
pub fn a_lower_bound(econ: &Economy, bounds: &EconomyBounds, t: f64) -> f64 {
    -(econ.horizon - t).max(0.0) * econ.ba * bounds.mu_e_sup
}

/// The constants entering the `S∞` and BMO bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AprioriConstants {
    /// `L = T·ba·‖μₑ‖∞`, so that `a ≥ −L`.
    pub a_floor: f64,
    /// `C1 = α‖e‖(1 + T e^L) + T e^{2L}` per agent.
    pub gronwall_c1: Vec<f64>,
    /// `C2 = e^L`.
    pub gronwall_c2: f64,
    /// `C1·e^{C2·T}` per agent.
    pub gronwall_bound: Vec<f64>,
    /// Driver growth `|f^i − ½|z^i|²| ≤ H(1 + |y^i|)` with `H = max(e^{2L} + e^L α‖e‖, e^L)`.
    pub growth: Vec<f64>,
}

/// Uses `e^{−x}(1+|x|) ≤ e^{2x⁻}` and `a ≥ −L` to bound
/// `|f^i − ½|z^i|²| ≤ e^{2L} + e^L(|y^i| + α^i‖e^i‖)`, then Gronwall.
pub fn apriori_constants(econ: &Economy, bounds: &EconomyBounds) -> AprioriConstants {
    let t = econ.horizon;
    let l = t * econ.ba * bounds.mu_e_sup;
    let el = l.exp();
    let e2l = (2.0 * l).exp();
    let scaled: Vec<f64> = econ
        .agents
        .iter()
        .zip(&bounds.endowment_sup)
        .map(|(a, s)| a.risk_aversion * s)
        .collect();
    let c1: Vec<f64> = scaled.iter().map(|ae| ae * (1.0 + t * el) + t * e2l).collect();
    let bound = c1.iter().map(|c| c * (el * t).exp()).collect();
    let growth = scaled.iter().map(|ae| (e2l + el * ae).max(el)).collect();
    AprioriConstants {
        a_floor: l,
        gronwall_c1: c1,
        gronwall_c2: el,
        gronwall_bound: bound,
        growth,
    }
}

/// `2[φ(y) + T·φ'(y)·H(1+y)]` for `y = ‖Y^i‖∞`: the bound on
/// `E[∫_τ^T |Z^i|² ds | F_τ]` from applying Itô to `φ(Y^i)`.
pub fn bmo_analytic_bound(y_sup: f64, growth: f64, horizon: f64) -> f64 {
    let y = y_sup.abs();
    2.0 * (phi(y) + horizon * phi_prime(y) * growth * (1.0 + y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AgentSpec, ScalarFn};
    use approx::assert_relative_eq;

    #[test]
    fn phi_values() {
        assert_eq!(phi(0.0), 0.0);
        assert_relative_eq!(phi(1.0), (std::f64::consts::E.powi(2) - 3.0) / 4.0, epsilon = 1e-15);
        assert_relative_eq!(phi(1.0), 1.097264, epsilon = 1e-6);
        assert_eq!(phi(-1.5), phi(1.5));
        for x in [-2.0, -0.3, 0.0, 0.4, 1.7] {
            assert!(phi(x) >= 0.0 && phi_prime(x) * x >= 0.0);
            assert_relative_eq!(0.5 * phi_second(x) - phi_prime(x).abs(), 0.5, epsilon = 1e-12);
            let h = 1e-6;
            assert_relative_eq!((phi(x + h) - phi(x - h)) / (2.0 * h), phi_prime(x), epsilon = 1e-6);
        }
    }

    #[test]
    fn zero_endowment_constants() {
        let econ = Economy::new(vec![AgentSpec::new(1.0, ScalarFn::Zero, 1.0)], 1.0).unwrap();
        let b = EconomyBounds {
            mu_e_sup: 0.0,
            endowment_sup: vec![0.0],
        };
        let c = apriori_constants(&econ, &b);
        assert_eq!(c.a_floor, 0.0);
        assert_relative_eq!(c.gronwall_c1[0], 1.0);
        assert_relative_eq!(c.gronwall_bound[0], std::f64::consts::E, epsilon = 1e-15);
        // |Y| = log 2 in the closed form, inside the bound
        assert!(2f64.ln() <= c.gronwall_bound[0]);
        assert_eq!(a_lower_bound(&econ, &b, 0.3), 0.0);
        assert!(bmo_analytic_bound(0.0, c.growth[0], 1.0) == 0.0);
        assert!(bmo_analytic_bound(0.7, c.growth[0], 1.0) > 0.0);
    }
}
