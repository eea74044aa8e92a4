//! Feed-forward classifier with hand-written backpropagation.
//!
//! Parameters live in one flat vector so that a posterior over them is a
//! single [`DiagGaussian`]. Layer `l` occupies `out·in` weights stored
//! row-major as an `(out, in)` matrix followed by `out` biases. Hidden layers
//! use ReLU; the output layer produces logits for a softmax.

use std::cell::Cell;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DiagGaussian;

thread_local! {
    static MODEL_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of forward/backward passes made on the current thread.
pub fn model_calls() -> u64 {
    MODEL_CALLS.with(Cell::get)
}

fn count_call() {
    MODEL_CALLS.with(|c| c.set(c.get() + 1));
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
}

impl TryFrom<Vec<usize>> for MlpSpec {
    type Error = Error;

    fn try_from(sizes: Vec<usize>) -> Result<Self> {
        MlpSpec::new(sizes)
    }
}

impl From<MlpSpec> for Vec<usize> {
    fn from(spec: MlpSpec) -> Self {
        spec.layer_sizes
    }
}

impl MlpSpec {
    /// `layer_sizes` lists input, hidden and output widths.
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument(
                "an MLP needs at least an input and an output layer".into(),
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument("layer sizes must be positive".into()));
        }
        Ok(MlpSpec { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// (fan_in, fan_out, offset) of each layer in the flat vector.
    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.layer_sizes.windows(2).scan(0usize, |offset, w| {
            let start = *offset;
            *offset += w[0] * w[1] + w[1];
            Some((w[0], w[1], start))
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; self.param_count()];
        for (fan_in, fan_out, offset) in self.layers() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut theta[offset..offset + fan_in * fan_out] {
                *w = rng.random_range(-limit..limit);
            }
        }
        theta
    }
}

pub fn param_count(spec: &MlpSpec) -> usize {
    spec.param_count()
}

/// Split a flat parameter vector into per-layer `(weights, bias)` pairs.
pub fn unpack(spec: &MlpSpec, theta: &[f64]) -> Result<Vec<(Array2<f64>, Array1<f64>)>> {
    check_len(spec, theta)?;
    Ok(spec
        .layers()
        .map(|(fan_in, fan_out, off)| {
            let w = Array2::from_shape_vec((fan_out, fan_in), theta[off..off + fan_in * fan_out].to_vec())
                .expect("shape matches slice");
            let b = Array1::from(theta[off + fan_in * fan_out..off + fan_in * fan_out + fan_out].to_vec());
            (w, b)
        })
        .collect())
}

/// Inverse of [`unpack`].
pub fn pack(layers: &[(Array2<f64>, Array1<f64>)]) -> Vec<f64> {
    let mut theta = Vec::new();
    for (w, b) in layers {
        theta.extend(w.iter().copied());
        theta.extend(b.iter().copied());
    }
    theta
}

fn check_len(spec: &MlpSpec, theta: &[f64]) -> Result<()> {
    if theta.len() != spec.param_count() {
        return Err(Error::DimensionMismatch {
            expected: spec.param_count(),
            actual: theta.len(),
        });
    }
    Ok(())
}

fn check_inputs(spec: &MlpSpec, inputs: &ArrayView2<f64>) -> Result<()> {
    if inputs.ncols() != spec.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim(),
            actual: inputs.ncols(),
        });
    }
    Ok(())
}

fn layer_views<'a>(spec: &MlpSpec, theta: &'a [f64]) -> Vec<(ArrayView2<'a, f64>, ArrayView1<'a, f64>)> {
    spec.layers()
        .map(|(fan_in, fan_out, off)| {
            let w = ArrayView2::from_shape((fan_out, fan_in), &theta[off..off + fan_in * fan_out])
                .expect("shape matches slice");
            let b = ArrayView1::from(&theta[off + fan_in * fan_out..off + fan_in * fan_out + fan_out]);
            (w, b)
        })
        .collect()
}

/// Pre-activations of every layer; the last entry holds the logits.
fn forward_all(spec: &MlpSpec, theta: &[f64], inputs: ArrayView2<f64>) -> Vec<Array2<f64>> {
    let layers = layer_views(spec, theta);
    let mut pre = Vec::with_capacity(layers.len());
    let mut act = inputs.to_owned();
    for (i, (w, b)) in layers.iter().enumerate() {
        let z = act.dot(&w.t()) + b;
        if i + 1 < layers.len() {
            act = z.mapv(|v| v.max(0.0));
        }
        pre.push(z);
    }
    pre
}

/// Logits for a batch of rows.
pub fn forward(spec: &MlpSpec, theta: &[f64], inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_len(spec, theta)?;
    check_inputs(spec, &inputs)?;
    count_call();
    Ok(forward_all(spec, theta, inputs).pop().expect("at least one layer"))
}

/// Row-wise max-shifted softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}

/// A minibatch: one input row per label.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub inputs: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(inputs: ArrayView2<'a, f64>, labels: &'a [usize]) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.nrows(),
                actual: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(Error::Empty("batch"));
        }
        Ok(Batch { inputs, labels })
    }
}

/// Mean cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad(spec: &MlpSpec, theta: &[f64], batch: &Batch<'_>) -> Result<(f64, Vec<f64>)> {
    check_len(spec, theta)?;
    check_inputs(spec, &batch.inputs)?;
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= spec.classes()) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {} classes",
            spec.classes()
        )));
    }
    count_call();

    let n = batch.labels.len() as f64;
    let pre = forward_all(spec, theta, batch.inputs);
    let logits = pre.last().expect("at least one layer");
    if let Some((index, &value)) = logits.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "logits",
            index,
            value,
        });
    }

    // Softmax and NLL via a max-shifted log-sum-exp.
    let mut delta = logits.clone();
    let mut nll = 0.0;
    for (mut row, &y) in delta.rows_mut().into_iter().zip(batch.labels) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        nll += lse - row[y];
        row.mapv_inplace(|v| (v - lse).exp());
        row[y] -= 1.0;
    }
    nll /= n;
    delta /= n;

    let views = layer_views(spec, theta);
    let offsets: Vec<(usize, usize, usize)> = spec.layers().collect();
    let mut grad = vec![0.0; theta.len()];
    for l in (0..views.len()).rev() {
        let (fan_in, fan_out, off) = offsets[l];
        let prev_act = if l == 0 {
            batch.inputs.to_owned()
        } else {
            pre[l - 1].mapv(|v| v.max(0.0))
        };
        let gw = delta.t().dot(&prev_act);
        let gb = delta.sum_axis(Axis(0));
        grad[off..off + fan_in * fan_out].copy_from_slice(gw.as_slice().expect("standard layout"));
        grad[off + fan_in * fan_out..off + fan_in * fan_out + fan_out]
            .copy_from_slice(gb.as_slice().expect("standard layout"));
        if l > 0 {
            let mut back = delta.dot(&views[l].0);
            back.zip_mut_with(&pre[l - 1], |g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            delta = back;
        }
    }
    Ok((nll, grad))
}

/// Draw `θ = μ + σ ⊙ ε` from a diagonal Gaussian.
pub fn sample_gaussian<R: Rng + ?Sized>(posterior: &DiagGaussian, rng: &mut R) -> Vec<f64> {
    posterior
        .mean()
        .iter()
        .zip(posterior.var())
        .map(|(m, v)| {
            let eps: f64 = rng.sample(StandardNormal);
            m + v.sqrt() * eps
        })
        .collect()
}

/// Posterior predictive: softmax outputs averaged over `samples` draws.
pub fn predict_proba_mc(
    spec: &MlpSpec,
    posterior: &DiagGaussian,
    inputs: ArrayView2<f64>,
    samples: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    if samples == 0 {
        return Err(Error::InvalidArgument("at least one Monte-Carlo sample is required".into()));
    }
    check_len(spec, posterior.mean())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Array2::<f64>::zeros((inputs.nrows(), spec.classes()));
    for _ in 0..samples {
        let theta = sample_gaussian(posterior, &mut rng);
        acc += &softmax_rows(&forward(spec, &theta, inputs)?);
    }
    acc /= samples as f64;
    Ok(acc)
}

/// Convenience for tests and examples: row `i` of `m` as a one-row matrix.
pub fn row(m: &Array2<f64>, i: usize) -> Array2<f64> {
    m.slice(s![i..i + 1, ..]).to_owned()
}
