//! Brute-force references for the closed forms.
//!
//! Nothing in this file calls [`aggregate`](super::aggregate) or
//! [`project`](super::project); both routines work from divergence
//! evaluations only, so they can check the closed forms independently.

use super::{coordinate_divergence, AggregationMethod, DiagGaussian, Divergence};
use crate::error::{Error, Result};

/// Weighted objective that `method` minimizes: `Σ w_k D(q‖p_k)`.
///
/// EAA is not a barycenter of any of the three divergences; its objective is
/// the weighted squared Euclidean distance in (mean, variance) coordinates,
/// whose minimizer is exactly the weighted average of both statistics.
pub fn barycenter_objective(
    method: AggregationMethod,
    candidate: &DiagGaussian,
    posteriors: &[DiagGaussian],
    weights: &[f64],
) -> Result<f64> {
    if posteriors.len() != weights.len() {
        return Err(Error::InvalidWeights(format!(
            "{} weights for {} posteriors",
            weights.len(),
            posteriors.len()
        )));
    }
    let mut total = 0.0;
    for (p, w) in posteriors.iter().zip(weights) {
        if p.dim() != candidate.dim() {
            return Err(Error::DimensionMismatch {
                expected: candidate.dim(),
                actual: p.dim(),
            });
        }
        total += w * objective_terms(method, candidate.mean(), candidate.var(), p);
    }
    Ok(total)
}

/// [`barycenter_objective`] on raw slices, without dimension checks.
pub(crate) fn weighted_objective(
    method: AggregationMethod,
    mean: &[f64],
    var: &[f64],
    posteriors: &[DiagGaussian],
    weights: &[f64],
) -> f64 {
    posteriors
        .iter()
        .zip(weights)
        .map(|(p, w)| w * objective_terms(method, mean, var, p))
        .sum()
}

fn objective_terms(method: AggregationMethod, mean: &[f64], var: &[f64], p: &DiagGaussian) -> f64 {
    (0..mean.len())
        .map(|i| {
            let (mp, vp) = (p.mean()[i], p.var()[i]);
            match method {
                AggregationMethod::Eaa => {
                    let dm = mean[i] - mp;
                    let dv = var[i] - vp;
                    dm * dm + dv * dv
                }
                AggregationMethod::W2b => coordinate_divergence(Divergence::W2Sq, mean[i], var[i], mp, vp),
                AggregationMethod::Rklb => coordinate_divergence(Divergence::Rkl, mean[i], var[i], mp, vp),
            }
        })
        .sum()
}

const SIGMA_GRID_POINTS: usize = 2001;
const FINE_SIGMA_STEP: f64 = 1e-4;
const BISECTION_STEPS: usize = 80;

/// Brute-force solution of `min D(p‖p_g)` subject to `D(p‖p_k) ≤ radius`
/// over one-dimensional Gaussians.
///
/// If `p_g` already lies in the sphere it is the answer. Otherwise the
/// minimizer sits on the sphere boundary; the boundary is traced by scanning
/// the standard deviation over `[min − 3·span, max + 3·span]` (clipped to
/// positive values), solving `D(N(μ, σ²)‖p_k) = radius` for the two boundary
/// means by bisection, and keeping the point with the smallest objective. The
/// scan is refined once around the best coarse point, to a final resolution
/// of at most `1e-4` in σ; the boundary mean is resolved to machine precision.
pub fn numeric_projection_oracle(
    d: Divergence,
    global: &DiagGaussian,
    local: &DiagGaussian,
    radius: f64,
) -> Result<DiagGaussian> {
    if global.dim() != 1 || local.dim() != 1 {
        return Err(Error::InvalidArgument(
            "the projection oracle only handles one-dimensional Gaussians".into(),
        ));
    }
    if !(radius.is_finite() && radius >= 0.0) {
        return Err(Error::InvalidArgument(format!("radius {radius} must be finite and >= 0")));
    }
    let (mg, vg) = (global.mean()[0], global.var()[0]);
    let (mk, vk) = (local.mean()[0], local.var()[0]);

    if coordinate_divergence(d, mg, vg, mk, vk) <= radius {
        return Ok(global.clone());
    }
    if radius == 0.0 {
        return Ok(local.clone());
    }

    let objective = |m: f64, s: f64| coordinate_divergence(d, m, s * s, mg, vg);
    let constraint = |m: f64, s: f64| coordinate_divergence(d, m, s * s, mk, vk);
    let mean_scale = (mg - mk).abs().max(vg.sqrt()).max(vk.sqrt()).max(1.0);

    // Both supported divergences are, for fixed σ, increasing in |μ − μ_k|.
    let boundary_point = |s: f64| -> Option<(f64, f64)> {
        if constraint(mk, s) > radius {
            return None;
        }
        let mut best: Option<(f64, f64)> = None;
        for dir in [-1.0, 1.0] {
            let mut far = mean_scale;
            while constraint(mk + dir * far, s) <= radius {
                far *= 2.0;
                if far > 1e12 {
                    return None;
                }
            }
            let (mut inside, mut outside) = (0.0, far);
            for _ in 0..BISECTION_STEPS {
                let mid = 0.5 * (inside + outside);
                if constraint(mk + dir * mid, s) <= radius {
                    inside = mid;
                } else {
                    outside = mid;
                }
            }
            let m = mk + dir * inside;
            let f = objective(m, s);
            if best.map_or(true, |(_, bf)| f < bf) {
                best = Some((m, f));
            }
        }
        best
    };

    let scan = |lo: f64, hi: f64, n: usize| -> Option<(f64, f64, f64)> {
        let mut best: Option<(f64, f64, f64)> = None;
        for i in 0..n {
            let s = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            if let Some((m, f)) = boundary_point(s) {
                if best.map_or(true, |(_, _, bf)| f < bf) {
                    best = Some((s, m, f));
                }
            }
        }
        best
    };

    let (sg, sk) = (vg.sqrt(), vk.sqrt());
    let (lo, hi) = (sg.min(sk), sg.max(sk));
    let span = if hi - lo > 1e-12 { hi - lo } else { 0.5 * hi };
    let s_lo = (lo - 3.0 * span).max(lo * 1e-3);
    let s_hi = hi + 3.0 * span;

    let coarse_step = (s_hi - s_lo) / (SIGMA_GRID_POINTS - 1) as f64;
    let (s0, _, _) = scan(s_lo, s_hi, SIGMA_GRID_POINTS).ok_or_else(|| {
        Error::InvalidArgument("projection oracle found no feasible boundary point".into())
    })?;
    let fine_lo = (s0 - 2.0 * coarse_step).max(s_lo);
    let fine_hi = (s0 + 2.0 * coarse_step).min(s_hi);
    let fine_points = (((fine_hi - fine_lo) / FINE_SIGMA_STEP).ceil() as usize + 1).max(SIGMA_GRID_POINTS);
    let (s, m, _) = scan(fine_lo, fine_hi, fine_points).expect("coarse optimum is feasible");
    DiagGaussian::scalar(m, s * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{divergence, project, Lambda};

    fn g(m: f64, v: f64) -> DiagGaussian {
        DiagGaussian::scalar(m, v).unwrap()
    }

    #[test]
    fn zero_radius_gives_the_centre() {
        let out = numeric_projection_oracle(Divergence::W2Sq, &g(0.0, 1.0), &g(4.0, 9.0), 0.0).unwrap();
        assert_eq!(out, g(4.0, 9.0));
    }

    #[test]
    fn inactive_constraint_gives_the_global_posterior() {
        let (pg, pk) = (g(0.0, 1.0), g(4.0, 9.0));
        let r = divergence(Divergence::Rkl, &pg, &pk).unwrap();
        assert_eq!(numeric_projection_oracle(Divergence::Rkl, &pg, &pk, r).unwrap(), pg);
        assert_eq!(numeric_projection_oracle(Divergence::Rkl, &pg, &pk, r + 1.0).unwrap(), pg);
    }

    #[test]
    fn matches_the_two_point_w2_barycenter() {
        let (pg, pk) = (g(0.0, 1.0), g(4.0, 9.0));
        let closed = project(Divergence::W2Sq, &pg, &pk, Lambda::Finite(1.0)).unwrap();
        let r = divergence(Divergence::W2Sq, &closed, &pk).unwrap();
        let brute = numeric_projection_oracle(Divergence::W2Sq, &pg, &pk, r).unwrap();
        assert!((brute.mean()[0] - 2.0).abs() < 1e-3, "{brute:?}");
        assert!((brute.std()[0] - 2.0).abs() < 1e-3, "{brute:?}");
    }

    #[test]
    fn rejects_multivariate_input() {
        let p = DiagGaussian::isotropic(vec![0.0; 2], 1.0).unwrap();
        assert!(numeric_projection_oracle(Divergence::W2Sq, &p, &p, 0.1).is_err());
        assert!(numeric_projection_oracle(Divergence::W2Sq, &g(0.0, 1.0), &g(1.0, 1.0), -1.0).is_err());
    }

    #[test]
    fn objective_is_minimized_by_worked_examples() {
        let ps = [g(0.0, 1.0), g(2.0, 1.0 / 3.0)];
        let w = [0.5, 0.5];
        let at = |m, v| barycenter_objective(AggregationMethod::Rklb, &g(m, v), &ps, &w).unwrap();
        let best = at(1.5, 0.5);
        for (dm, dv) in [(1e-3, 0.0), (-1e-3, 0.0), (0.0, 1e-3), (0.0, -1e-3)] {
            assert!(at(1.5 + dm, 0.5 + dv) > best);
        }
    }
}
