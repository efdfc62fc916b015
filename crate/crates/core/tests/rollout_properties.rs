use std::sync::Arc;

use deep_bsde::cli::{grad_check_on, CIR_THRESHOLD, GRAD_PATHS, GRAD_STEPS};
use deep_bsde::model::{
    analytic_bond_price, analytic_bond_price_dx, make_cir_bond_1d, make_cir_bond_multi,
    make_cir_bond_with_rule, sqrt_plus, CirParams, Coefficients, FbsdeProblem, SqrtRule,
};
use deep_bsde::net::NetParams;
use deep_bsde::{paths, rollout};
use proptest::prelude::*;

fn unit() -> CirParams {
    CirParams::scalar(1.0, 1.0, 1.0).unwrap()
}

#[test]
fn no_truncation_means_identical_rollouts() {
    let params = CirParams::scalar(2.0, 1.0, 0.3).unwrap();
    let full = make_cir_bond_with_rule(params.clone(), 1, 1.0, vec![1.0], SqrtRule::FullTruncation).unwrap();
    let raw = make_cir_bond_with_rule(params, 1, 1.0, vec![1.0], SqrtRule::Raw).unwrap();
    let net = NetParams::init(3, full.dims);
    let batch = paths::generate(3, 0, 300, 50, 1, 1.0).unwrap();
    let (lf, tape) = rollout::simulate(&full, &net, &batch).unwrap();
    assert!(tape.min_state() > 0.0);
    let gf = rollout::backward(&full, &net, &tape).unwrap();
    let (lr, gr) = rollout::loss_and_grad(&raw, &net, &batch).unwrap();
    assert_eq!(lf.loss.to_bits(), lr.loss.to_bits());
    assert_eq!(gf, gr);
}

#[test]
fn truncation_keeps_negative_states_finite() {
    let params = CirParams::scalar(0.5, 0.05, 1.5).unwrap();
    let full = make_cir_bond_with_rule(params.clone(), 1, 1.0, vec![0.05], SqrtRule::FullTruncation).unwrap();
    let raw = make_cir_bond_with_rule(params, 1, 1.0, vec![0.05], SqrtRule::Raw).unwrap();
    let net = NetParams::init(0, full.dims);
    let batch = paths::generate(0, 0, 200, 50, 1, 1.0).unwrap();
    let (_, tape) = rollout::simulate(&full, &net, &batch).unwrap();
    assert!(tape.truncated_count() > 0);
    assert!(rollout::loss_and_grad(&full, &net, &batch).is_ok());
    assert!(rollout::loss(&raw, &net, &batch).is_err());
}

#[test]
fn one_component_multi_bond_equals_scalar_bond() {
    let one = make_cir_bond_1d(unit(), 1.0, 1.0).unwrap();
    let multi = make_cir_bond_multi(unit(), 1, 1, 1.0, vec![1.0]).unwrap();
    let net = NetParams::init(4, one.dims);
    let batch = paths::generate(4, 2, 256, 25, 1, 1.0).unwrap();
    let a = rollout::loss_and_grad(&one, &net, &batch).unwrap();
    let b = rollout::loss_and_grad(&multi, &net, &batch).unwrap();
    assert_eq!(a.0.loss.to_bits(), b.0.loss.to_bits());
    assert_eq!(a.1, b.1);
}

#[test]
fn exact_control_loss_shrinks_with_more_steps() {
    let params = unit();
    let problem = make_cir_bond_1d(params.clone(), 1.0, 1.0).unwrap();
    let y0 = analytic_bond_price(&params, 0.0, 1.0, 1.0).unwrap();
    let control = |t: f64, x: &[f64]| {
        let ux = analytic_bond_price_dx(&params, t, 1.0, x[0].max(0.0)).unwrap();
        vec![ux * params.sigma[0] * sqrt_plus(x[0])]
    };
    let losses: Vec<f64> = [10, 50, 100, 500]
        .iter()
        .map(|&n| {
            let batch = paths::generate(17, 0, 4000, n, 1, 1.0).unwrap();
            rollout::simulate_with_control(&problem, &[y0], control, &batch)
                .unwrap()
                .loss
        })
        .collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

/// CIR coefficients with the driver adjoint dropped.
#[derive(Debug)]
struct BrokenAdjoint(Arc<dyn Coefficients>);

impl Coefficients for BrokenAdjoint {
    fn drift(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.0.drift(t, x, y, out)
    }
    fn drift_vjp(&self, t: f64, x: &[f64], y: &[f64], adj: &[f64], ax: &mut [f64], ay: &mut [f64]) {
        self.0.drift_vjp(t, x, y, adj, ax, ay)
    }
    fn diffusion_row(&self, i: usize, t: f64, xi: f64, row: &mut [f64]) {
        self.0.diffusion_row(i, t, xi, row)
    }
    fn diffusion_row_dx(&self, i: usize, t: f64, xi: f64, row: &mut [f64]) {
        self.0.diffusion_row_dx(i, t, xi, row)
    }
    fn driver(&self, t: f64, x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) {
        self.0.driver(t, x, y, z, out)
    }
    fn driver_vjp(
        &self,
        _: f64,
        _: &[f64],
        _: &[f64],
        _: &[f64],
        _: &[f64],
        _: &mut [f64],
        _: &mut [f64],
        _: &mut [f64],
    ) {
    }
    fn terminal(&self, x: &[f64], out: &mut [f64]) {
        self.0.terminal(x, out)
    }
    fn terminal_vjp(&self, x: &[f64], adj: &[f64], adj_x: &mut [f64]) {
        self.0.terminal_vjp(x, adj, adj_x)
    }
}

#[test]
fn broken_adjoint_fails_the_gradient_check() {
    let good = make_cir_bond_1d(CirParams::scalar(2.0, 1.0, 0.3).unwrap(), 1.0, 1.0).unwrap();
    let broken = FbsdeProblem::new(
        good.dims,
        good.horizon,
        good.x0.clone(),
        Arc::new(BrokenAdjoint(good.coeffs.clone())),
    )
    .unwrap();
    let net = NetParams::init(1, good.dims);
    let batch = paths::generate(1, 0, GRAD_PATHS, GRAD_STEPS, 1, 1.0).unwrap();
    let ok = grad_check_on("cir", &good, &net, &batch, 1, CIR_THRESHOLD).unwrap();
    assert!(ok.passed, "{}", ok.line());
    let bad = grad_check_on("broken", &broken, &net, &batch, 1, CIR_THRESHOLD).unwrap();
    assert!(!bad.passed, "{}", bad.line());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn worker_count_does_not_change_gradients(seed in any::<u64>(), m in 1usize..400, threads in 2usize..5) {
        let problem = make_cir_bond_multi(CirParams::sample_unit(3, seed).unwrap(), 3, 2, 1.0, vec![1.0; 3]).unwrap();
        let net = NetParams::init(seed, problem.dims);
        let batch = paths::generate(seed, 1, m, 8, 2, 1.0).unwrap();
        let run = |t: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .unwrap()
                .install(|| rollout::loss_and_grad(&problem, &net, &batch).unwrap())
        };
        let (l1, g1) = run(1);
        let (lt, gt) = run(threads);
        prop_assert_eq!(l1.loss.to_bits(), lt.loss.to_bits());
        prop_assert_eq!(g1, gt);
    }
}
