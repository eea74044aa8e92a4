//! Divergences, barycenters, projections and geodesics on the manifold of
//! mean-field (diagonal-covariance) Gaussians.
//!
//! Everything here is a pure function of its inputs. The central identity is
//! that projecting a global posterior `p_g` onto a divergence sphere around a
//! local posterior `p_k` is the same as taking the two-point barycenter of
//! `{p_g, p_k}` with weights `1/(λ+1)` and `λ/(λ+1)`, where `λ` is the
//! Lagrange multiplier of the sphere constraint. For the reverse-KL and
//! Wasserstein-2 geometries that barycenter has a closed form, so
//! personalization costs a handful of vector operations.

mod codec;
mod oracle;
pub mod validate;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use codec::{read_binary, write_binary, BINARY_MAGIC, BINARY_VERSION};
pub use oracle::{barycenter_objective, numeric_projection_oracle};

/// Smallest variance an aggregation may produce.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Tolerance on `Σ w = 1` before weights are treated as a caller bug.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// A Gaussian with diagonal covariance over a flat parameter vector.
///
/// Construction checks that `mean` and `var` have the same non-zero length
/// and that every variance is finite and strictly positive; the fields are
/// private so the invariant cannot be broken afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGaussian", into = "RawGaussian")]
pub struct DiagGaussian {
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGaussian {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl TryFrom<RawGaussian> for DiagGaussian {
    type Error = Error;

    fn try_from(raw: RawGaussian) -> Result<Self> {
        DiagGaussian::new(raw.mean, raw.var)
    }
}

impl From<DiagGaussian> for RawGaussian {
    fn from(g: DiagGaussian) -> Self {
        RawGaussian {
            mean: g.mean,
            var: g.var,
        }
    }
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.is_empty() {
            return Err(Error::Empty("gaussian mean"));
        }
        if mean.len() != var.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                actual: var.len(),
            });
        }
        if let Some((index, &value)) = mean.iter().enumerate().find(|(_, m)| !m.is_finite()) {
            return Err(Error::NonFinite {
                what: "mean",
                index,
                value,
            });
        }
        if let Some((index, &value)) = var
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::InvalidVariance { index, value });
        }
        Ok(DiagGaussian { mean, var })
    }

    /// One-dimensional `N(mean, var)`.
    pub fn scalar(mean: f64, var: f64) -> Result<Self> {
        Self::new(vec![mean], vec![var])
    }

    /// `N(mean, var·I)`.
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, vec![var; d])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    pub fn std(&self) -> Vec<f64> {
        self.var.iter().map(|v| v.sqrt()).collect()
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>) {
        (self.mean, self.var)
    }

    fn check_same_dim(&self, other: &DiagGaussian) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(())
    }
}

/// The divergences available on the manifold.
///
/// Every variant is evaluated as `D(q‖p)` with the candidate `q` in the
/// first slot and the reference `p` in the second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Divergence {
    /// `KL(q‖p) = E_q[ln q − ln p]`, the regularizer of the variational objective.
    #[serde(rename = "KL")]
    Kl,
    /// Reverse KL in the variational sense: the exclusive divergence
    /// `E_q[ln q − ln p]` measured from the candidate. Its weighted barycenter
    /// is precision-weighted (multiplicative) fusion. Numerically it coincides
    /// with [`Divergence::Kl`]; the separate tag selects the geometry that
    /// supports barycenters and projections.
    #[serde(rename = "RKL")]
    Rkl,
    /// Squared Wasserstein-2 distance.
    #[serde(rename = "W2SQ")]
    W2Sq,
}

impl Divergence {
    pub const ALL: [Divergence; 3] = [Divergence::Kl, Divergence::Rkl, Divergence::W2Sq];

    pub fn name(self) -> &'static str {
        match self {
            Divergence::Kl => "KL",
            Divergence::Rkl => "RKL",
            Divergence::W2Sq => "W2SQ",
        }
    }

    /// Aggregation rule whose output is the weighted barycenter under this
    /// divergence, when one is supported.
    pub fn barycenter_method(self) -> Option<AggregationMethod> {
        match self {
            Divergence::Kl => None,
            Divergence::Rkl => Some(AggregationMethod::Rklb),
            Divergence::W2Sq => Some(AggregationMethod::W2b),
        }
    }
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Divergence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "KL" => Ok(Divergence::Kl),
            "RKL" => Ok(Divergence::Rkl),
            "W2SQ" | "W2" => Ok(Divergence::W2Sq),
            other => Err(Error::InvalidArgument(format!("unknown divergence `{other}`"))),
        }
    }
}

/// Server-side rules for combining weighted posteriors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AggregationMethod {
    /// Empirical arithmetic aggregation: weighted mean of means and of variances.
    #[serde(rename = "EAA")]
    Eaa,
    /// Wasserstein-2 barycenter: weighted mean of means, square of the
    /// weighted mean of standard deviations.
    #[serde(rename = "W2B")]
    W2b,
    /// Reverse-KL barycenter: precision-weighted fusion.
    #[serde(rename = "RKLB")]
    Rklb,
}

impl AggregationMethod {
    pub const ALL: [AggregationMethod; 3] = [
        AggregationMethod::Eaa,
        AggregationMethod::W2b,
        AggregationMethod::Rklb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregationMethod::Eaa => "EAA",
            AggregationMethod::W2b => "W2B",
            AggregationMethod::Rklb => "RKLB",
        }
    }
}

impl fmt::Display for AggregationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "EAA" => Ok(AggregationMethod::Eaa),
            "W2B" | "WB" => Ok(AggregationMethod::W2b),
            "RKLB" => Ok(AggregationMethod::Rklb),
            other => Err(Error::InvalidArgument(format!(
                "unknown aggregation method `{other}`"
            ))),
        }
    }
}

/// Personalization strength. `Infinity` is an explicit sentinel so that the
/// local-model endpoint is reproduced bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub enum Lambda {
    Finite(f64),
    Infinity,
}

impl Lambda {
    pub fn new(value: f64) -> Result<Self> {
        if value == f64::INFINITY {
            Ok(Lambda::Infinity)
        } else if value.is_finite() && value >= 0.0 {
            Ok(Lambda::Finite(value))
        } else {
            Err(Error::InvalidLambda(value))
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Lambda::Finite(v) => v,
            Lambda::Infinity => f64::INFINITY,
        }
    }

    pub fn weights(self) -> ProjectionWeights {
        match self {
            Lambda::Finite(l) => ProjectionWeights {
                global: 1.0 / (l + 1.0),
                local: l / (l + 1.0),
            },
            Lambda::Infinity => ProjectionWeights {
                global: 0.0,
                local: 1.0,
            },
        }
    }
}

impl fmt::Display for Lambda {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lambda::Finite(v) => write!(f, "{v}"),
            Lambda::Infinity => f.write_str("inf"),
        }
    }
}

impl FromStr for Lambda {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinity") {
            return Ok(Lambda::Infinity);
        }
        let v: f64 = t
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("cannot parse lambda `{s}`")))?;
        Lambda::new(v)
    }
}

impl Serialize for Lambda {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Lambda::Finite(v) => s.serialize_f64(*v),
            Lambda::Infinity => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Lambda {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        let parsed = match Repr::deserialize(d)? {
            Repr::Num(v) => Lambda::new(v),
            Repr::Text(s) => s.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

/// Barycenter weights `(w_g, w_k)` equivalent to a sphere multiplier `λ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionWeights {
    pub global: f64,
    pub local: f64,
}

/// Contribution of a single coordinate to `D(q‖p)`.
pub(crate) fn coordinate_divergence(d: Divergence, mq: f64, vq: f64, mp: f64, vp: f64) -> f64 {
    match d {
        Divergence::Kl | Divergence::Rkl => {
            let dm = mp - mq;
            0.5 * (vq / vp + dm * dm / vp - 1.0 + (vp / vq).ln())
        }
        Divergence::W2Sq => {
            let dm = mq - mp;
            let ds = vq.sqrt() - vp.sqrt();
            dm * dm + ds * ds
        }
    }
}

/// `D(q‖p)` for diagonal Gaussians.
pub fn divergence(d: Divergence, q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    q.check_same_dim(p)?;
    let value: f64 = (0..q.dim())
        .map(|i| coordinate_divergence(d, q.mean[i], q.var[i], p.mean[i], p.var[i]))
        .sum();
    // Rounding can push an exact zero a few ulps below.
    Ok(value.max(0.0))
}

fn validated_weights(n: usize, weights: &[f64]) -> Result<Vec<f64>> {
    if weights.len() != n {
        return Err(Error::InvalidWeights(format!(
            "{} weights for {n} posteriors",
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidWeights(format!("weight {w} is negative or non-finite")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::InvalidWeights(format!(
            "weights sum to {total}, expected 1 within {WEIGHT_SUM_TOLERANCE:e}"
        )));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Combine weighted posteriors with the given rule.
///
/// Weights must be non-negative and sum to one within `1e-9`; they are
/// renormalized internally. Posteriors with zero weight take no part in the
/// computation, so a one-hot weight vector returns that posterior unchanged.
pub fn aggregate(
    method: AggregationMethod,
    posteriors: &[DiagGaussian],
    weights: &[f64],
) -> Result<DiagGaussian> {
    let first = posteriors.first().ok_or(Error::Empty("posterior list"))?;
    for p in &posteriors[1..] {
        first.check_same_dim(p)?;
    }
    let weights = validated_weights(posteriors.len(), weights)?;

    let active: Vec<(&DiagGaussian, f64)> = posteriors
        .iter()
        .zip(weights.iter().copied())
        .filter(|(_, w)| *w > 0.0)
        .collect();
    if let [(only, _)] = active.as_slice() {
        return Ok((*only).clone());
    }

    let d = first.dim();
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    match method {
        AggregationMethod::Eaa => {
            for (p, w) in &active {
                for i in 0..d {
                    mean[i] += w * p.mean[i];
                    var[i] += w * p.var[i];
                }
            }
        }
        AggregationMethod::W2b => {
            let mut std = vec![0.0; d];
            for (p, w) in &active {
                for i in 0..d {
                    mean[i] += w * p.mean[i];
                    std[i] += w * p.var[i].sqrt();
                }
            }
            for i in 0..d {
                var[i] = std[i] * std[i];
            }
        }
        AggregationMethod::Rklb => {
            let mut precision = vec![0.0; d];
            let mut weighted = vec![0.0; d];
            for (p, w) in &active {
                for i in 0..d {
                    let prec = 1.0 / p.var[i];
                    precision[i] += w * prec;
                    weighted[i] += w * prec * p.mean[i];
                }
            }
            for i in 0..d {
                var[i] = 1.0 / precision[i];
                mean[i] = var[i] * weighted[i];
            }
        }
    }

    let mut clamped = 0usize;
    for v in var.iter_mut() {
        if !(*v >= VARIANCE_FLOOR) {
            *v = VARIANCE_FLOOR;
            clamped += 1;
        }
    }
    if clamped > 0 {
        log::warn!("{method} aggregation clamped {clamped} variances to {VARIANCE_FLOOR:e}");
    }
    DiagGaussian::new(mean, var)
}

/// Personalized posterior: the projection of `global` onto the `d`-sphere
/// around `local` whose radius corresponds to multiplier `lambda`.
///
/// Computed as the two-point barycenter with weights `1/(λ+1)` and
/// `λ/(λ+1)`. `λ = 0` returns `global` and `λ = ∞` returns `local`, both bit
/// for bit. Only the RKL and W2 geometries are supported.
pub fn project(
    d: Divergence,
    global: &DiagGaussian,
    local: &DiagGaussian,
    lambda: Lambda,
) -> Result<DiagGaussian> {
    let method = d.barycenter_method().ok_or(Error::UnsupportedDivergence(d.name()))?;
    if let Lambda::Finite(l) = lambda {
        if !(l.is_finite() && l >= 0.0) {
            return Err(Error::InvalidLambda(l));
        }
    }
    global.check_same_dim(local)?;
    match lambda {
        Lambda::Finite(l) if l == 0.0 => Ok(global.clone()),
        Lambda::Infinity => Ok(local.clone()),
        _ => {
            let w = lambda.weights();
            aggregate(
                method,
                &[global.clone(), local.clone()],
                &[w.global, w.local],
            )
        }
    }
}

/// Points along the geodesic from `global` (λ = 0) to `local` (λ = ∞).
pub fn geodesic_sweep(
    d: Divergence,
    global: &DiagGaussian,
    local: &DiagGaussian,
    lambdas: &[Lambda],
) -> Result<Vec<DiagGaussian>> {
    if lambdas.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::InvalidArgument(
            "lambda grid must be sorted ascending".into(),
        ));
    }
    lambdas
        .iter()
        .map(|&l| project(d, global, local, l))
        .collect()
}
