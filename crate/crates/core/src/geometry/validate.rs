//! Randomized property suite for the geometry closed forms.
//!
//! Three properties are checked on random one-dimensional instances:
//!
//! * **barycenter optimality**: the closed-form aggregate attains an
//!   objective no larger than any point of a `1e-3` grid around it (plus a
//!   coarse grid over the whole search box);
//! * **projection equivalence**: for λ ∈ {0.25, 1, 4}, the closed-form
//!   projection coincides with the brute-force constrained minimizer at the
//!   radius it induces;
//! * **geodesic monotonicity**: along the default λ grid the divergence to
//!   the local posterior never increases and the divergence to the global
//!   posterior never decreases, and both endpoints are exact.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    aggregate, barycenter_objective, divergence, numeric_projection_oracle, project,
    AggregationMethod, DiagGaussian, Divergence, Lambda,
};
use super::oracle::weighted_objective;
use crate::error::Result;

/// Tolerance in (μ, σ) between closed-form and brute-force projections.
pub const PROJECTION_TOLERANCE: f64 = 2e-3;
/// Grid step of the barycenter optimality check.
pub const OBJECTIVE_GRID_STEP: f64 = 1e-3;
/// Relative slack on monotonicity comparisons (floating-point noise only).
pub const MONOTONE_SLACK: f64 = 1e-12;

pub const PROJECTION_LAMBDAS: [f64; 3] = [0.25, 1.0, 4.0];

/// λ grid used by sweeps when none is configured.
pub fn default_lambda_grid() -> Vec<Lambda> {
    [0.0, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0, 10.0]
        .into_iter()
        .map(Lambda::Finite)
        .chain(std::iter::once(Lambda::Infinity))
        .collect()
}

/// Deliberately wrong closed forms, used to check that the suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// W2B uses the arithmetic mean of variances instead of squaring the
    /// mean standard deviation.
    W2bUsesEaaVariance,
}

#[derive(Debug, Clone)]
pub struct ValidationConfig {
    pub instances: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            instances: 100,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyOutcome {
    pub name: &'static str,
    pub checks: usize,
    pub failures: usize,
    /// Largest observed violation (objective gap, parameter distance, …).
    pub worst: f64,
    pub counterexample: Option<String>,
}

impl PropertyOutcome {
    fn new(name: &'static str) -> Self {
        PropertyOutcome {
            name,
            checks: 0,
            failures: 0,
            worst: 0.0,
            counterexample: None,
        }
    }

    fn record(&mut self, ok: bool, error: f64, describe: impl FnOnce() -> String) {
        self.checks += 1;
        if error > self.worst {
            self.worst = error;
        }
        if !ok {
            self.failures += 1;
            if self.counterexample.is_none() {
                self.counterexample = Some(describe());
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub outcomes: Vec<PropertyOutcome>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(PropertyOutcome::passed)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<26} {:>7} {:>8} {:>12}  status", "property", "checks", "failures", "worst")?;
        for o in &self.outcomes {
            writeln!(
                f,
                "{:<26} {:>7} {:>8} {:>12.3e}  {}",
                o.name,
                o.checks,
                o.failures,
                o.worst,
                if o.passed() { "PASS" } else { "FAIL" }
            )?;
            if let Some(c) = &o.counterexample {
                writeln!(f, "  counterexample: {c}")?;
            }
        }
        Ok(())
    }
}

/// Closed forms under test, optionally with an injected fault.
struct ClosedForms(Option<Fault>);

impl ClosedForms {
    fn aggregate(&self, method: AggregationMethod, ps: &[DiagGaussian], ws: &[f64]) -> Result<DiagGaussian> {
        match (self.0, method) {
            (Some(Fault::W2bUsesEaaVariance), AggregationMethod::W2b) => {
                let eaa = aggregate(AggregationMethod::Eaa, ps, ws)?;
                let w2 = aggregate(AggregationMethod::W2b, ps, ws)?;
                DiagGaussian::new(w2.mean().to_vec(), eaa.var().to_vec())
            }
            _ => aggregate(method, ps, ws),
        }
    }

    fn project(&self, d: Divergence, pg: &DiagGaussian, pk: &DiagGaussian, lambda: Lambda) -> Result<DiagGaussian> {
        match (self.0, lambda) {
            (None, _) | (_, Lambda::Infinity) => project(d, pg, pk, lambda),
            (Some(_), Lambda::Finite(l)) if l == 0.0 => project(d, pg, pk, lambda),
            (Some(_), _) => {
                let w = lambda.weights();
                let method = d.barycenter_method().expect("projection divergence");
                self.aggregate(method, &[pg.clone(), pk.clone()], &[w.global, w.local])
            }
        }
    }
}

fn describe(g: &DiagGaussian) -> String {
    format!("N({:.6}, {:.6})", g.mean()[0], g.var()[0])
}

fn random_gaussian(rng: &mut ChaCha8Rng) -> DiagGaussian {
    let m = rng.random_range(-3.0..3.0);
    let s: f64 = rng.random_range(0.3..3.0);
    DiagGaussian::scalar(m, s * s).expect("positive variance")
}

/// Number of adjacent pairs that break monotonicity (beyond rounding noise).
pub fn monotone_violations(values: &[f64], non_increasing: bool) -> usize {
    values
        .windows(2)
        .filter(|w| {
            let slack = MONOTONE_SLACK * (1.0 + w[0].abs().max(w[1].abs()));
            if non_increasing {
                w[1] > w[0] + slack
            } else {
                w[1] < w[0] - slack
            }
        })
        .count()
}

fn grid_minimum(
    method: AggregationMethod,
    ps: &[DiagGaussian],
    ws: &[f64],
    mean_range: (f64, f64),
    std_range: (f64, f64),
    step: f64,
) -> Result<(f64, f64, f64)> {
    let nm = ((mean_range.1 - mean_range.0) / step).round() as usize + 1;
    let ns = ((std_range.1 - std_range.0) / step).round() as usize + 1;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..nm {
        let m = mean_range.0 + i as f64 * step;
        for j in 0..ns {
            let s = std_range.0 + j as f64 * step;
            if s <= 0.0 {
                continue;
            }
            let f = weighted_objective(method, &[m], &[s * s], ps, ws);
            if f < best.0 {
                best = (f, m, s);
            }
        }
    }
    Ok(best)
}

fn check_barycenters(forms: &ClosedForms, rng: &mut ChaCha8Rng, n: usize) -> Result<PropertyOutcome> {
    let mut out = PropertyOutcome::new("barycenter-optimality");
    for _ in 0..n {
        let ps = [random_gaussian(rng), random_gaussian(rng)];
        let w0 = rng.random_range(0.05..0.95);
        let ws = [w0, 1.0 - w0];
        for method in AggregationMethod::ALL {
            let closed = forms.aggregate(method, &ps, &ws)?;
            let f_closed = barycenter_objective(method, &closed, &ps, &ws)?;
            let (m0, s0) = (closed.mean()[0], closed.std()[0]);

            let half = 0.25;
            let local = grid_minimum(
                method,
                &ps,
                &ws,
                (m0 - half, m0 + half),
                ((s0 - half).max(OBJECTIVE_GRID_STEP), s0 + half),
                OBJECTIVE_GRID_STEP,
            )?;
            let global = grid_minimum(method, &ps, &ws, (-12.0, 12.0), (0.01, 12.0), 0.05)?;
            let best = if local.0 < global.0 { local } else { global };
            let gap = f_closed - best.0;
            let ok = gap <= 1e-12 * (1.0 + f_closed.abs());
            out.record(ok, gap.max(0.0), || {
                format!(
                    "{method} of {{{}, {}}} with w={:?}: closed form {} has objective {:.9}, \
                     grid point N({:.4}, {:.4}) has {:.9}",
                    describe(&ps[0]),
                    describe(&ps[1]),
                    ws,
                    describe(&closed),
                    f_closed,
                    best.1,
                    best.2 * best.2,
                    best.0
                )
            });
        }
    }
    Ok(out)
}

fn check_projections(forms: &ClosedForms, rng: &mut ChaCha8Rng, n: usize) -> Result<PropertyOutcome> {
    let mut out = PropertyOutcome::new("projection-equivalence");
    for _ in 0..n {
        let pg = random_gaussian(rng);
        let pk = random_gaussian(rng);
        for d in [Divergence::Rkl, Divergence::W2Sq] {
            for l in PROJECTION_LAMBDAS {
                let closed = forms.project(d, &pg, &pk, Lambda::Finite(l))?;
                let radius = divergence(d, &closed, &pk)?;
                let brute = numeric_projection_oracle(d, &pg, &pk, radius)?;
                let err = (closed.mean()[0] - brute.mean()[0])
                    .abs()
                    .max((closed.std()[0] - brute.std()[0]).abs());
                out.record(err <= PROJECTION_TOLERANCE, err, || {
                    format!(
                        "{d}, λ={l}, p_g={}, p_k={}: closed form {} vs oracle {} (radius {radius:.6})",
                        describe(&pg),
                        describe(&pk),
                        describe(&closed),
                        describe(&brute)
                    )
                });
            }
        }
    }
    Ok(out)
}

fn check_geodesics(forms: &ClosedForms, rng: &mut ChaCha8Rng, n: usize) -> Result<PropertyOutcome> {
    let mut out = PropertyOutcome::new("geodesic-monotonicity");
    let grid = default_lambda_grid();
    for _ in 0..n {
        let pg = random_gaussian(rng);
        let pk = random_gaussian(rng);
        for d in [Divergence::Rkl, Divergence::W2Sq] {
            let path = grid
                .iter()
                .map(|&l| forms.project(d, &pg, &pk, l))
                .collect::<Result<Vec<_>>>()?;
            let to_local = path.iter().map(|p| divergence(d, p, &pk)).collect::<Result<Vec<_>>>()?;
            let to_global = path.iter().map(|p| divergence(d, p, &pg)).collect::<Result<Vec<_>>>()?;
            let bad = monotone_violations(&to_local, true) + monotone_violations(&to_global, false);
            let endpoints = path.first() == Some(&pg) && path.last() == Some(&pk);
            out.record(bad == 0 && endpoints, bad as f64, || {
                format!(
                    "{d}, p_g={}, p_k={}: {bad} monotonicity violations, exact endpoints: {endpoints}",
                    describe(&pg),
                    describe(&pk)
                )
            });
        }
    }
    Ok(out)
}

/// Run all three properties on `cfg.instances` random instances each.
pub fn run(cfg: &ValidationConfig) -> Result<ValidationReport> {
    let forms = ClosedForms(cfg.fault);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let outcomes = vec![
        check_barycenters(&forms, &mut rng, cfg.instances)?,
        check_projections(&forms, &mut rng, cfg.instances)?,
        check_geodesics(&forms, &mut rng, cfg.instances)?,
    ];
    Ok(ValidationReport { outcomes })
}
