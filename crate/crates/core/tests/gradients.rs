//! Analytic gradients against central finite differences.

use fedhier_core::math::{log_cosh_grad, log_cosh_penalty, ParamVector, SmoothL1Config};
use fedhier_core::models::{init_params, loss_and_grad, param_count, Batch, InitScheme, ModelSpec};
use fedhier_core::solver::{objective_h, BatchLoss, ProxTerms};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const CASES: u64 = 20;

/// `|a - n| / max(|a|, |n|, 1e-3)`: relative, with an absolute floor for
/// components that are numerically zero.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

fn max_fd_error(f: impl Fn(&ParamVector) -> f64, x: &ParamVector, grad: &ParamVector, coords: &[usize]) -> f64 {
    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut plus = x.clone().into_vec();
        let mut minus = plus.clone();
        plus[i] += H;
        minus[i] -= H;
        let fd = (f(&ParamVector::new(plus).unwrap()) - f(&ParamVector::new(minus).unwrap())) / (2.0 * H);
        worst = worst.max(rel_err(grad[i], fd));
    }
    worst
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, input: usize, classes: usize) -> Batch {
    let features = Array2::from_shape_fn((n, input), |_| rng.gen_range(0.0..1.0));
    let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    Batch::new(features, labels).unwrap()
}

fn random_params(rng: &mut ChaCha8Rng, spec: &ModelSpec) -> ParamVector {
    let base = init_params(spec, InitScheme::GlorotUniform, rng);
    // nonzero biases so every code path is exercised
    ParamVector::new(base.as_slice().iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect()).unwrap()
}

#[test]
fn log_cosh_gradient_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rho = rng.gen_range(0.05..2.0);
        let cfg = SmoothL1Config::new(rho).unwrap();
        let x = ParamVector::new((0..12).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let g = log_cosh_grad(&x, cfg).unwrap();
        let coords: Vec<usize> = (0..x.dim()).collect();
        worst = worst.max(max_fd_error(|p| log_cosh_penalty(p, cfg).unwrap(), &x, &g, &coords));
    }
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}

#[test]
fn mlr_gradient_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let l2 = if seed % 2 == 0 { 0.0 } else { 1e-2 };
        let spec = ModelSpec::mlr(7, 4, l2);
        let batch = random_batch(&mut rng, 9, 7, 4);
        let w = random_params(&mut rng, &spec);
        let (_, g) = loss_and_grad(&spec, &w, &batch).unwrap();
        let coords: Vec<usize> = (0..param_count(&spec)).collect();
        worst = worst.max(max_fd_error(|p| loss_and_grad(&spec, p, &batch).unwrap().0, &w, &g, &coords));
    }
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let hidden = if seed % 2 == 0 { vec![6] } else { vec![6, 5] };
        let spec = ModelSpec::mlp(8, hidden, 3);
        let batch = random_batch(&mut rng, 10, 8, 3);
        let w = random_params(&mut rng, &spec);
        let (_, g) = loss_and_grad(&spec, &w, &batch).unwrap();
        let coords: Vec<usize> = (0..param_count(&spec)).collect();
        worst = worst.max(max_fd_error(|p| loss_and_grad(&spec, p, &batch).unwrap().0, &w, &g, &coords));
    }
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}

#[test]
fn subproblem_gradient_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let spec = ModelSpec::mlp(5, vec![4], 3);
        let batch = random_batch(&mut rng, 6, 5, 3);
        let theta = random_params(&mut rng, &spec);
        let center = random_params(&mut rng, &spec);
        let terms = ProxTerms {
            lambda1: rng.gen_range(1.0..30.0),
            gamma1: rng.gen_range(0.0..0.5),
            rho: rng.gen_range(0.1..1.0),
        };
        let loss = BatchLoss { spec: &spec, batch: &batch };
        let (_, g) = objective_h(&theta, &center, &loss, terms).unwrap();
        let coords: Vec<usize> = (0..theta.dim()).collect();
        worst = worst.max(max_fd_error(|p| objective_h(p, &center, &loss, terms).unwrap().0, &theta, &g, &coords));
    }
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}
