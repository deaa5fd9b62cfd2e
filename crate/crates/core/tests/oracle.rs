use radner_core::drivers::DriverKind;
use radner_core::model::{AgentSpec, DiffusionFn, DriftFn, Economy, ScalarFn, StateDynamics};
use radner_core::pde_solver::{solve_backward, GridSpec, SchemeParams};
use radner_core::picard_kernel::{picard_solve, KernelSpec, QuadPlan};

const TOL: f64 = 1e-10;

fn plan(lambda: f64, x0: f64) -> KernelSpec {
    KernelSpec { lambda, beta: None, quad: QuadPlan::new(x0, 1.0, 96, 40, 80) }
}

#[test]
fn fixed_point_residual_is_within_twice_the_tolerance() {
    let dyn_ = StateDynamics::new(1, DriftFn::Zero, DiffusionFn::Scalar(1.0), 1.0, vec![0.0]).unwrap();
    let econ = Economy::new(vec![AgentSpec::new(1.0, ScalarFn::Zero, 1.0)], 1.0).unwrap();
    let out = picard_solve(&econ, &dyn_, DriverKind::Truncated { n: 5.0 }, &plan(1.0, 0.0), TOL, 100).unwrap();
    assert!(out.trace.converged);
    assert!(out.trace.fixed_point_residual <= 2.0 * TOL, "{}", out.trace.fixed_point_residual);
    assert!(out.trace.contraction_factor < 1.0);
}

#[test]
fn agrees_with_finite_differences_off_centre() {
    let (lambda, x0) = (0.8, 0.3);
    let dyn_ = StateDynamics::new(1, DriftFn::Zero, DiffusionFn::Scalar(lambda), 1.0 / lambda, vec![x0]).unwrap();
    let econ = Economy::new(
        vec![
            AgentSpec::new(1.2, ScalarFn::GaussianBump { center: 0.0, width: 1.2, height: 0.6 }, 0.5),
            AgentSpec::new(0.8, ScalarFn::Constant(0.2), 0.5),
        ],
        1.0,
    )
    .unwrap();
    let out = picard_solve(&econ, &dyn_, DriverKind::Truncated { n: 5.0 }, &plan(lambda, x0), TOL, 100).unwrap();
    let g = GridSpec::centered(2000, x0, 8.0, 320).unwrap();
    let fd = solve_backward(&econ, &dyn_, DriverKind::Full, &g, &SchemeParams::default()).unwrap();
    let k = econ.components();
    let (mut pk, mut fv) = (vec![0.0; k], vec![0.0; k]);
    out.u.value_at(0, x0, &mut pk);
    fd.interpolate(0.0, &[x0], &mut fv);
    for j in 0..k {
        assert!((pk[j] - fv[j]).abs() <= 2e-3, "component {j}: picard {} vs fd {}", pk[j], fv[j]);
    }
    assert!(out.trace.contraction_factor <= 0.75, "{}", out.trace.contraction_factor);
}
