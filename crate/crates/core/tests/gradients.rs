use fedproj::models::{loss_and_grad, Batch, MlpSpec};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn central_difference(spec: &MlpSpec, theta: &[f64], batch: &Batch<'_>, i: usize) -> f64 {
    let mut plus = theta.to_vec();
    let mut minus = theta.to_vec();
    plus[i] += EPS;
    minus[i] -= EPS;
    let (fp, _) = loss_and_grad(spec, &plus, batch).unwrap();
    let (fm, _) = loss_and_grad(spec, &minus, batch).unwrap();
    (fp - fm) / (2.0 * EPS)
}

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.
fn worst_relative_error(layers: Vec<usize>, seed: u64) -> f64 {
    let spec = MlpSpec::new(layers).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta: Vec<f64> = (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rows = 6;
    let x = Array2::from_shape_fn((rows, spec.input_dim()), |_| rng.random_range(-2.0..2.0));
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..spec.classes())).collect();
    let batch = Batch::new(x.view(), &labels).unwrap();
    let (_, grad) = loss_and_grad(&spec, &theta, &batch).unwrap();
    (0..theta.len())
        .map(|i| {
            let num = central_difference(&spec, &theta, &batch, i);
            (grad[i] - num).abs() / grad[i].abs().max(num.abs()).max(1e-6)
        })
        .fold(0.0, f64::max)
}

#[test]
fn backprop_matches_finite_differences_on_twenty_networks() {
    for seed in 0..20 {
        let err = worst_relative_error(vec![4, 5, 3], seed);
        assert!(err < REL_TOL, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn deeper_networks_also_match() {
    for seed in 0..5 {
        let err = worst_relative_error(vec![3, 6, 4, 2], seed);
        assert!(err < REL_TOL, "seed {seed}: relative error {err:e}");
    }
}
