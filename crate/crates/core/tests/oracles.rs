//! Independent finite-difference and closed-form checks of the derivative code.

use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use oes::adjoint::{fd_grad, grad, GradMode};
use oes::controller::{Conditioning, OesArchitecture, OesPendulum, PdPlusPolicy, PendulumPolicy};
use oes::neural::{self, Activation, MlpSpec, OutputActivation};
use oes::ode::SolverConfig;
use oes::optimize::{ClosedLoopTask, CostSpec};
use oes::ph::PendulumParams;

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn random_net(rng: &mut ChaCha8Rng, out_act: OutputActivation) -> (MlpSpec, Vec<f64>) {
    let spec = MlpSpec::new(3, vec![7, 5], vec![Activation::Softplus, Activation::Tanh], 1, out_act).unwrap();
    let theta: Vec<f64> = (0..spec.n_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (spec, theta)
}

fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn network_input_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for act in [OutputActivation::None, OutputActivation::Softplus] {
        let (spec, theta) = random_net(&mut rng, act);
        let z = [0.3, -0.7, 1.1];
        let jac = neural::grad_input(&spec, &theta, &z).unwrap();
        let num = fd(|z| neural::forward(&spec, &theta, z).unwrap()[0], &z, 1e-6);
        let ana: Vec<f64> = jac.iter().copied().collect();
        assert!(rel_l2(&ana, &num) < 1e-8, "{ana:?} vs {num:?}");
    }
}

#[test]
fn network_input_hessian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (spec, theta) = random_net(&mut rng, OutputActivation::None);
    let z = [-0.4, 0.9, 0.2];
    let h = neural::input_hessian(&spec, &theta, &z).unwrap();
    for j in 0..3 {
        let col = fd(|z| neural::grad_input(&spec, &theta, z).unwrap()[(0, j)], &z, 1e-5);
        for i in 0..3 {
            assert_relative_eq!(h[(i, j)], col[i], epsilon = 1e-8, max_relative = 1e-6);
        }
    }
    assert_relative_eq!(h, h.transpose(), epsilon = 1e-12);
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (spec, theta) = random_net(&mut rng, OutputActivation::Softplus);
    let z = [0.5, 0.1, -1.3];
    let v = [0.7, -0.2, 0.4];
    let g = neural::vjp_params(&spec, &theta, &z, &[1.0]).unwrap();
    let num = fd(|t| neural::forward(&spec, t, &z).unwrap()[0], &theta, 1e-6);
    assert!(rel_l2(&g, &num) < 1e-7);

    let (spec, theta) = random_net(&mut rng, OutputActivation::None);
    let g2 = neural::grad_input_vjp_params(&spec, &theta, &z, &v).unwrap();
    let dir = |t: &[f64]| {
        let j = neural::grad_input(&spec, t, &z).unwrap();
        (0..3).map(|k| j[(0, k)] * v[k]).sum::<f64>()
    };
    let num2 = fd(dir, &theta, 1e-6);
    assert!(rel_l2(&g2, &num2) < 1e-7);
}

#[test]
fn output_bound_dominates_sampled_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (spec, theta) = random_net(&mut rng, OutputActivation::None);
    let bound = neural::output_bound(&spec, &theta).unwrap();
    for _ in 0..2000 {
        let z: Vec<f64> = (0..3).map(|_| rng.gen_range(-50.0..50.0)).collect();
        assert!(neural::forward(&spec, &theta, &z).unwrap()[0].abs() <= bound);
    }
}

fn small_oes(conditioning: Conditioning, horizon: f64) -> OesArchitecture {
    OesArchitecture::new(
        1,
        conditioning,
        horizon,
        vec![8, 8],
        vec![Activation::Softplus, Activation::Tanh],
        vec![8],
        vec![Activation::Softplus],
        OutputActivation::Relu,
    )
    .unwrap()
}

fn perturbed(arch: &OesArchitecture, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut theta = arch.init(rng, false).0;
    theta.iter_mut().for_each(|v| *v *= 0.5);
    let kb = theta.len() - 1;
    theta[kb] = 0.3 + theta[kb].abs();
    theta
}

#[test]
fn pendulum_adjoint_matches_finite_differences() {
    let plant = PendulumParams::default();
    let cost = CostSpec::regulation(0.01, 1.0);
    let arch = small_oes(Conditioning::TimeVarying, 1.0);
    let policy = OesPendulum::new(arch.clone(), &plant).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = SolverConfig::with_tolerances(1e-10, 1e-10);
    for _ in 0..3 {
        let theta = perturbed(&arch, &mut rng);
        let x0 = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let task = ClosedLoopTask::new(plant, &policy, cost, cost.regulation_target());
        let g = grad(&task, &theta, &x0, &cfg, GradMode::Checkpointed).unwrap();
        let num = fd_grad(&task, &theta, &x0, &cfg, 1e-5, None).unwrap();
        let e = rel_l2(&g.grad, &num);
        assert!(e < 1e-4, "relative error {e}");
        let r = grad(&task, &theta, &x0, &cfg, GradMode::Reversible).unwrap();
        assert!(rel_l2(&r.grad, &g.grad) < 1e-5);
    }
}

#[test]
fn setpoint_adjoint_matches_finite_differences() {
    let plant = PendulumParams::default();
    let cost = CostSpec::setpoint(0.5, 1.0);
    let arch = small_oes(Conditioning::SetPoint, 1.0);
    let policy = OesPendulum::new(arch.clone(), &plant).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let cfg = SolverConfig::with_tolerances(1e-10, 1e-10);
    let theta = perturbed(&arch, &mut rng);
    let task = ClosedLoopTask::new(plant, &policy, cost, [0.8, 0.0]);
    let x0 = [-0.5, 0.4];
    let g = grad(&task, &theta, &x0, &cfg, GradMode::Auto).unwrap();
    let num = fd_grad(&task, &theta, &x0, &cfg, 1e-5, None).unwrap();
    assert!(rel_l2(&g.grad, &num) < 1e-4);
}

#[test]
fn pd_adjoint_matches_finite_differences() {
    let plant = PendulumParams::default();
    let cost = CostSpec::regulation(0.01, 3.0);
    let policy = PdPlusPolicy { plant };
    let task = ClosedLoopTask::new(plant, &policy, cost, cost.regulation_target());
    let cfg = SolverConfig::with_tolerances(1e-10, 1e-10);
    let theta = [2.0, 1.5];
    let g = grad(&task, &theta, &[1.0, -0.5], &cfg, GradMode::Auto).unwrap();
    let num = fd_grad(&task, &theta, &[1.0, -0.5], &cfg, 1e-5, None).unwrap();
    assert!(rel_l2(&g.grad, &num) < 1e-5);
}

#[test]
fn control_partials_match_finite_differences() {
    let plant = PendulumParams::default();
    let arch = small_oes(Conditioning::TimeVarying, 3.0);
    let policy = OesPendulum::new(arch.clone(), &plant).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let theta = perturbed(&arch, &mut rng);
    let (t, q, p) = (0.7, 0.4, -0.9);
    let mut g = vec![0.0; theta.len()];
    let mut weight = |_u: f64| 1.0;
    let parts = policy.control_adjoint(&theta, t, q, p, 0.0, &mut weight, &mut g).unwrap();
    let h = 1e-6;
    let dq = (policy.control(&theta, t, q + h, p, 0.0).unwrap() - policy.control(&theta, t, q - h, p, 0.0).unwrap()) / (2.0 * h);
    let dp = (policy.control(&theta, t, q, p + h, 0.0).unwrap() - policy.control(&theta, t, q, p - h, 0.0).unwrap()) / (2.0 * h);
    assert_relative_eq!(parts.du_dq, dq, epsilon = 1e-7, max_relative = 1e-6);
    assert_relative_eq!(parts.du_dp, dp, epsilon = 1e-7, max_relative = 1e-6);
    let num = fd(|th| policy.control(th, t, q, p, 0.0).unwrap(), &theta, 1e-6);
    assert!(rel_l2(&g, &num) < 1e-6, "{}", rel_l2(&g, &num));
}
