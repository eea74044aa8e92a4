//! Variational online Newton optimizer over a diagonal Gaussian posterior.
//!
//! The state keeps a mean and a per-coordinate Hessian estimate `h`. The
//! posterior variance is never stored; it is always recomputed as
//! `σ² = 1/(N·(h + δ))` where `N` is the effective sample size and `δ` the
//! weight decay. [`hessian_of`] inverts that relation so a posterior received
//! from elsewhere can be installed as optimizer state.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{divergence, write_binary, DiagGaussian, Divergence};
use crate::models::MlpSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IvonHyper {
    pub lr: f64,
    pub weight_decay: f64,
    /// Effective sample size `N`.
    pub ess: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Initial Hessian value.
    pub h0: f64,
    /// Global update-norm clip, if any.
    pub clip_radius: Option<f64>,
}

impl Default for IvonHyper {
    fn default() -> Self {
        IvonHyper {
            lr: 0.1,
            weight_decay: 2e-4,
            ess: 1,
            beta1: 0.9,
            beta2: 0.99999,
            h0: 5.0,
            clip_radius: None,
        }
    }
}

impl IvonHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.ess == 0 {
            return bad("ess must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.h0.is_finite() && self.h0 > 0.0) {
            return bad("h0 must be positive");
        }
        if let Some(r) = self.clip_radius {
            if !(r.is_finite() && r > 0.0) {
                return bad("clip_radius must be positive");
            }
        }
        Ok(())
    }

    fn variance(&self, h: f64) -> f64 {
        1.0 / (self.ess as f64 * (h + self.weight_decay))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvonState {
    pub mean: Vec<f64>,
    pub hess: Vec<f64>,
    pub grad_momentum: Vec<f64>,
    pub hyper: IvonHyper,
    pub step_count: u64,
    /// Deterministic mode: no sampling, no Hessian updates, and a fixed
    /// reported variance.
    pub frozen_var: Option<f64>,
}

/// Fresh state around the model's seeded initialization.
pub fn ivon_init(spec: &MlpSpec, hyper: IvonHyper, seed: u64) -> Result<IvonState> {
    IvonState::new(spec.init_params(seed), hyper)
}

impl IvonState {
    pub fn new(mean: Vec<f64>, hyper: IvonHyper) -> Result<Self> {
        hyper.validate()?;
        if mean.is_empty() {
            return Err(Error::Empty("parameter vector"));
        }
        let d = mean.len();
        Ok(IvonState {
            hess: vec![hyper.h0; d],
            grad_momentum: vec![0.0; d],
            mean,
            hyper,
            step_count: 0,
            frozen_var: None,
        })
    }

    /// Switch to deterministic training with a fixed reported variance.
    pub fn freeze(mut self, var: f64) -> Result<Self> {
        if !(var.is_finite() && var > 0.0) {
            return Err(Error::InvalidVariance { index: 0, value: var });
        }
        self.frozen_var = Some(var);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Install `posterior` as the current state: mean copied, Hessian
    /// reconstructed with this state's own `N` and `δ`. Momentum and the
    /// bias-correction counter restart.
    pub fn install(&mut self, posterior: &DiagGaussian) -> Result<()> {
        if posterior.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: posterior.dim(),
            });
        }
        self.mean.copy_from_slice(posterior.mean());
        if self.frozen_var.is_none() {
            self.hess = hessian_of(posterior, self.hyper.ess, self.hyper.weight_decay);
        }
        self.grad_momentum.iter_mut().for_each(|g| *g = 0.0);
        self.step_count = 0;
        Ok(())
    }

    fn variances(&self) -> Result<Vec<f64>> {
        if let Some(v) = self.frozen_var {
            return Ok(vec![v; self.dim()]);
        }
        self.hess
            .iter()
            .enumerate()
            .map(|(index, &h)| {
                let v = self.hyper.variance(h);
                if v.is_finite() && v > 0.0 {
                    Ok(v)
                } else {
                    Err(Error::InvalidVariance { index, value: v })
                }
            })
            .collect()
    }
}

/// `N(mean, 1/(N·(h + δ)))`.
pub fn posterior_of(state: &IvonState) -> Result<DiagGaussian> {
    DiagGaussian::new(state.mean.clone(), state.variances()?)
}

/// Inverse of [`posterior_of`]: `h = 1/(N·σ²) − δ`, rectified at zero.
pub fn hessian_of(post: &DiagGaussian, ess: usize, delta: f64) -> Vec<f64> {
    let (hess, rectified) = reconstruct_hessian(post, ess, delta);
    if rectified > 0 {
        log::warn!("hessian reconstruction rectified {rectified} negative coordinates to 0");
    }
    hess
}

/// [`hessian_of`] plus the number of coordinates that were rectified.
pub fn reconstruct_hessian(post: &DiagGaussian, ess: usize, delta: f64) -> (Vec<f64>, usize) {
    let n = ess as f64;
    let mut rectified = 0;
    let hess = post
        .var()
        .iter()
        .map(|&v| {
            let h = 1.0 / (n * v) - delta;
            if h < 0.0 {
                rectified += 1;
                0.0
            } else {
                h
            }
        })
        .collect();
    (hess, rectified)
}

/// `θ = mean + σ ⊙ ε`; returns the mean unchanged in deterministic mode.
pub fn sample_params<R: Rng + ?Sized>(state: &IvonState, rng: &mut R) -> Result<Vec<f64>> {
    if state.frozen_var.is_some() {
        return Ok(state.mean.clone());
    }
    let var = state.variances()?;
    Ok(state
        .mean
        .iter()
        .zip(&var)
        .map(|(m, v)| {
            let eps: f64 = rng.sample(StandardNormal);
            m + v.sqrt() * eps
        })
        .collect())
}

/// One update from a single sampled gradient.
pub fn ivon_step(state: &mut IvonState, grad: &[f64], theta_sampled: &[f64]) -> Result<()> {
    ivon_step_mc(state, &[(grad, theta_sampled)])
}

/// One update from several `(gradient, sampled θ)` pairs; gradients and
/// Hessian estimates are averaged over the pairs.
pub fn ivon_step_mc(state: &mut IvonState, samples: &[(&[f64], &[f64])]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Empty("gradient samples"));
    }
    let d = state.dim();
    for (grad, theta) in samples {
        for len in [grad.len(), theta.len()] {
            if len != d {
                return Err(Error::DimensionMismatch { expected: d, actual: len });
            }
        }
        if let Some((index, &value)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient",
                index,
                value,
            });
        }
    }
    let s = samples.len() as f64;
    let hyper = state.hyper.clone();
    let delta = hyper.weight_decay;

    if state.frozen_var.is_none() {
        let var = state.variances()?;
        for i in 0..d {
            let h_hat = samples
                .iter()
                .map(|(g, th)| g[i] * (th[i] - state.mean[i]))
                .sum::<f64>()
                / (s * var[i]);
            let h = hyper.beta2 * state.hess[i] + (1.0 - hyper.beta2) * h_hat;
            state.hess[i] = h.max(0.0);
        }
    }

    state.step_count += 1;
    let correction = 1.0 - hyper.beta1.powf(state.step_count as f64);
    let mut update = vec![0.0; d];
    for i in 0..d {
        let g = samples.iter().map(|(g, _)| g[i]).sum::<f64>() / s;
        state.grad_momentum[i] = hyper.beta1 * state.grad_momentum[i] + (1.0 - hyper.beta1) * g;
        let g_bar = state.grad_momentum[i] / correction;
        let curvature = state.hess[i] + delta;
        if curvature <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "zero curvature at coordinate {i} with zero weight decay"
            )));
        }
        update[i] = hyper.lr * (g_bar + delta * state.mean[i]) / curvature;
    }
    if let Some(radius) = hyper.clip_radius {
        let norm = update.iter().map(|u| u * u).sum::<f64>().sqrt();
        if norm > radius {
            let scale = radius / norm;
            update.iter_mut().for_each(|u| *u *= scale);
        }
    }
    for (m, u) in state.mean.iter_mut().zip(&update) {
        *m -= u;
    }
    Ok(())
}

/// How the learning rate moves from `initial` to `final` over training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecayKind {
    #[default]
    Linear,
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_lr: f64,
    #[serde(default)]
    pub kind: DecayKind,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 0.1,
            final_lr: 0.01,
            kind: DecayKind::Linear,
        }
    }
}

impl LrSchedule {
    /// Learning rate after a fraction `progress ∈ [0, 1]` of training.
    pub fn at(&self, progress: f64) -> f64 {
        let t = progress.clamp(0.0, 1.0);
        match self.kind {
            DecayKind::Linear => self.initial * (1.0 - t) + self.final_lr * t,
            DecayKind::Cosine => {
                self.final_lr + 0.5 * (self.initial - self.final_lr) * (1.0 + (std::f64::consts::PI * t).cos())
            }
            DecayKind::Constant => self.initial,
        }
    }

    /// Rate at `step` of `total` equally spaced steps, hitting both endpoints.
    pub fn at_step(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.initial;
        }
        self.at(step as f64 / (total - 1) as f64)
    }
}

/// The shared prior `p(θ)`, fixed for the whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior(pub DiagGaussian);

impl Prior {
    /// `N(0, 1/(N·δ))`: the posterior the optimizer would report with zero
    /// curvature.
    pub fn from_decay(dim: usize, ess: usize, weight_decay: f64) -> Result<Self> {
        if !(weight_decay > 0.0) {
            return Err(Error::InvalidArgument("a decay-induced prior needs weight_decay > 0".into()));
        }
        Ok(Prior(DiagGaussian::isotropic(
            vec![0.0; dim],
            1.0 / (ess as f64 * weight_decay),
        )?))
    }
}

/// `mc_nll + KL(q‖prior)` where `mc_nll` estimates the expected negative
/// log-likelihood from `mc_samples` posterior draws.
pub fn negative_elbo(state: &IvonState, prior: &Prior, mc_nll: f64, mc_samples: usize) -> Result<f64> {
    if mc_samples == 0 {
        return Err(Error::InvalidArgument("the likelihood estimate needs at least one sample".into()));
    }
    let q = posterior_of(state)?;
    Ok(mc_nll + divergence(Divergence::Kl, &q, &prior.0)?)
}

#[derive(Debug, Serialize)]
struct HessStats {
    min: f64,
    max: f64,
    mean: f64,
}

#[derive(Debug, Serialize)]
struct Sidecar<'a> {
    hess: HessStats,
    step_count: u64,
    hyper: &'a IvonHyper,
}

/// Write `<stem>.bflg` (posterior) and `<stem>.json` (Hessian summary,
/// step count, hyperparameters).
pub fn save_checkpoint(state: &IvonState, stem: &Path) -> Result<()> {
    let post = posterior_of(state)?;
    write_binary(&post, BufWriter::new(File::create(stem.with_extension("bflg"))?))?;
    let n = state.hess.len() as f64;
    let sidecar = Sidecar {
        hess: HessStats {
            min: state.hess.iter().copied().fold(f64::INFINITY, f64::min),
            max: state.hess.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: state.hess.iter().sum::<f64>() / n,
        },
        step_count: state.step_count,
        hyper: &state.hyper,
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(stem.with_extension("json"))?), &sidecar)?;
    Ok(())
}
