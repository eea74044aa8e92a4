//! Wilcoxon signed-rank test for paired samples.
//!
//! Zero differences are dropped. Ties among `|d|` get average ranks; ranks
//! are doubled internally so they stay integral and the exact null
//! distribution can be counted without rounding.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest effective sample size handled by exact counting.
pub const EXACT_MAX_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W⁺, W⁻)`.
    pub statistic: f64,
    pub p_value: f64,
    pub n_effective: usize,
    pub method: TestMethod,
}

/// Doubled average ranks of `|d|` (ties share the mean rank).
fn doubled_ranks(abs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0u64; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // Positions i..=j hold ranks i+1..=j+1; doubled mean is i+j+2.
        for &k in &order[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    ranks
}

fn nonzero_differences(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::Empty("paired sample"));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|&d| d != 0.0).collect();
    if d.is_empty() {
        return Err(Error::DegenerateSample);
    }
    Ok(d)
}

/// Doubled `W⁺` and the doubled ranks.
fn doubled_statistic(d: &[f64]) -> (u64, Vec<u64>) {
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let plus = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    (plus, ranks)
}

/// Exact two-sided p over all `2ⁿ` sign patterns, counted by dynamic
/// programming over achievable rank sums.
pub fn wilcoxon_exact_p(x: &[f64], y: &[f64]) -> Result<f64> {
    let d = nonzero_differences(x, y)?;
    let (plus, ranks) = doubled_statistic(&d);
    let total: u64 = ranks.iter().sum();
    let w = plus.min(total - plus) as usize;
    let mut counts = vec![0f64; total as usize + 1];
    counts[0] = 1.0;
    for &r in &ranks {
        let r = r as usize;
        for s in (r..counts.len()).rev() {
            counts[s] += counts[s - r];
        }
    }
    let patterns = 2f64.powi(d.len() as i32);
    let tail: f64 = counts[..=w].iter().sum::<f64>() / patterns;
    Ok((2.0 * tail).min(1.0))
}

/// Normal approximation with tie correction and a continuity correction
/// of half a rank.
pub fn wilcoxon_normal_p(x: &[f64], y: &[f64]) -> Result<f64> {
    let d = nonzero_differences(x, y)?;
    let (plus, ranks) = doubled_statistic(&d);
    let n = d.len() as f64;
    let w = 0.5 * plus.min(ranks.iter().sum::<u64>() - plus) as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut ties = std::collections::HashMap::new();
    for r in &ranks {
        *ties.entry(r).or_insert(0u64) += 1;
    }
    let tie_term: f64 = ties.values().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term;
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok((2.0 * (1.0 - normal.cdf(z))).min(1.0))
}

/// Exact for effective `n ≤ 20`, normal approximation above.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    let d = nonzero_differences(x, y)?;
    let (plus, ranks) = doubled_statistic(&d);
    let total: u64 = ranks.iter().sum();
    let statistic = 0.5 * plus.min(total - plus) as f64;
    let (p_value, method) = if d.len() <= EXACT_MAX_N {
        (wilcoxon_exact_p(x, y)?, TestMethod::Exact)
    } else {
        (wilcoxon_normal_p(x, y)?, TestMethod::Normal)
    };
    Ok(WilcoxonResult {
        statistic,
        p_value,
        n_effective: d.len(),
        method,
    })
}

/// One cell of the lower-triangular p-value matrix. `result` is `None` when
/// the pair is degenerate (every paired difference is zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub method_a: String,
    pub method_b: String,
    pub metric: String,
    pub result: Option<WilcoxonResult>,
}

/// Pairwise tests for every `(a, b)` with `b` listed before `a`; the
/// diagonal is omitted. Scores must be aligned by (seed, dataset).
pub fn compare_aggregations(scores: &[(String, Vec<f64>)], metric: &str) -> Result<Vec<PairwiseTest>> {
    if scores.len() < 2 {
        return Err(Error::InvalidArgument("at least two methods are needed for a comparison".into()));
    }
    let n = scores[0].1.len();
    if let Some((name, s)) = scores.iter().find(|(_, s)| s.len() != n) {
        return Err(Error::InvalidArgument(format!(
            "misaligned pairs: {name} has {} scores, expected {n}",
            s.len()
        )));
    }
    let mut out = Vec::new();
    for i in 1..scores.len() {
        for j in 0..i {
            let (a, b) = (&scores[i], &scores[j]);
            let result = match wilcoxon_signed_rank(&a.1, &b.1) {
                Ok(r) => Some(r),
                Err(Error::DegenerateSample) => {
                    log::warn!("{} vs {} on {metric}: degenerate comparison", a.0, b.0);
                    None
                }
                Err(e) => return Err(e),
            };
            out.push(PairwiseTest {
                method_a: a.0.clone(),
                method_b: b.0.clone(),
                metric: metric.to_string(),
                result,
            });
        }
    }
    Ok(out)
}
