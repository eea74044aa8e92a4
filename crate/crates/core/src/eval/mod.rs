//! Accuracy, calibration and likelihood of a posterior predictive.

mod wilcoxon;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::DiagGaussian;
use crate::models::{predict_proba_mc, MlpSpec};

pub use wilcoxon::{
    compare_aggregations, wilcoxon_exact_p, wilcoxon_normal_p, wilcoxon_signed_rank, PairwiseTest, TestMethod,
    WilcoxonResult,
};

pub const DEFAULT_BINS: usize = 15;
pub const DEFAULT_MC_SAMPLES: usize = 10;
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Percent correct, in `[0, 100]`.
    pub accuracy: f64,
    pub ece: f64,
    pub nll: f64,
    pub n_examples: usize,
    pub mc_samples: usize,
    pub bins: usize,
}

/// Which model is evaluated on which data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    #[serde(rename = "PM-LD")]
    PersonalizedLocal,
    #[serde(rename = "PM-GD")]
    PersonalizedGlobal,
    #[serde(rename = "GM-LD")]
    GlobalLocal,
    #[serde(rename = "GM-GD")]
    GlobalGlobal,
}

impl Setting {
    pub const ALL: [Setting; 4] = [
        Setting::PersonalizedLocal,
        Setting::PersonalizedGlobal,
        Setting::GlobalLocal,
        Setting::GlobalGlobal,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Setting::PersonalizedLocal => "PM-LD",
            Setting::PersonalizedGlobal => "PM-GD",
            Setting::GlobalLocal => "GM-LD",
            Setting::GlobalGlobal => "GM-GD",
        }
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Metrics from predicted class probabilities (one row per example).
///
/// The predicted class is the first index attaining the row maximum. ECE
/// uses `bins` equal-width bins on the top probability.
pub fn metrics_from_probs(
    probs: ArrayView2<f64>,
    labels: &[usize],
    bins: usize,
    mc_samples: usize,
) -> Result<MetricsReport> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    if probs.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: probs.nrows(),
        });
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("ECE needs at least one bin".into()));
    }
    let n = labels.len();
    let mut correct = 0usize;
    let mut nll = 0.0;
    let mut bin_count = vec![0usize; bins];
    let mut bin_correct = vec![0usize; bins];
    let mut bin_conf = vec![0.0; bins];
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        if y >= row.len() {
            return Err(Error::InvalidArgument(format!("label {y} out of range for {} classes", row.len())));
        }
        let (pred, conf) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (c, &p)| if p > best.1 { (c, p) } else { best });
        let hit = pred == y;
        correct += usize::from(hit);
        nll -= row[y].max(PROB_FLOOR).ln();
        let b = ((conf * bins as f64).floor() as usize).min(bins - 1);
        bin_count[b] += 1;
        bin_correct[b] += usize::from(hit);
        bin_conf[b] += conf;
    }
    let ece = (0..bins)
        .filter(|&b| bin_count[b] > 0)
        .map(|b| {
            let m = bin_count[b] as f64;
            (m / n as f64) * (bin_correct[b] as f64 / m - bin_conf[b] / m).abs()
        })
        .sum();
    Ok(MetricsReport {
        accuracy: 100.0 * correct as f64 / n as f64,
        ece,
        nll: nll / n as f64,
        n_examples: n,
        mc_samples,
        bins,
    })
}

/// Monte-Carlo posterior predictive metrics on `ds`.
pub fn evaluate(
    spec: &MlpSpec,
    posterior: &DiagGaussian,
    ds: &Dataset,
    mc_samples: usize,
    bins: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let probs = predict_proba_mc(spec, posterior, ds.inputs().view(), mc_samples, seed)?;
    metrics_from_probs(probs.view(), ds.labels(), bins, mc_samples)
}

/// Mean and sample standard deviation (zero for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        if values.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn oracle_predictor() {
        let p = array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let m = metrics_from_probs(p.view(), &[0, 2], 15, 1).unwrap();
        assert_eq!((m.accuracy, m.nll, m.ece), (100.0, 0.0, 0.0));
    }

    #[test]
    fn uniform_predictor() {
        let p = Array2::from_elem((20, 10), 0.1);
        let labels: Vec<usize> = (0..20).map(|i| i % 10).collect();
        let m = metrics_from_probs(p.view(), &labels, 15, 1).unwrap();
        assert!((m.nll - 10f64.ln()).abs() < 1e-12);
        assert!(m.ece.abs() < 1e-12);
        assert_eq!(m.accuracy, 10.0);
    }

    #[test]
    fn four_example_ece_fixture() {
        let p = array![[0.9, 0.1], [0.9, 0.1], [0.6, 0.4], [0.6, 0.4]];
        let m = metrics_from_probs(p.view(), &[0, 1, 0, 1], 2, 1).unwrap();
        assert!((m.ece - 0.25).abs() < 1e-12);
        assert_eq!(m.accuracy, 50.0);
    }

    #[test]
    fn ties_go_to_the_lowest_class() {
        let p = array![[0.5, 0.5]];
        assert_eq!(metrics_from_probs(p.view(), &[0], 15, 1).unwrap().accuracy, 100.0);
        assert_eq!(metrics_from_probs(p.view(), &[1], 15, 1).unwrap().accuracy, 0.0);
    }

    #[test]
    fn nll_is_floored() {
        let p = array![[1.0, 0.0]];
        let m = metrics_from_probs(p.view(), &[1], 15, 1).unwrap();
        assert!((m.nll - -PROB_FLOOR.ln()).abs() < 1e-9);
        assert!(m.ece <= 1.0);
    }

    #[test]
    fn rejects_empty_and_bad_bins() {
        let p = Array2::<f64>::zeros((0, 2));
        assert!(metrics_from_probs(p.view(), &[], 15, 1).is_err());
        assert!(metrics_from_probs(array![[1.0]].view(), &[0], 0, 1).is_err());
    }

    #[test]
    fn mean_std() {
        let s = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert_eq!(MeanStd::of(&[4.0]).std, 0.0);
    }
}
