//! CSV and JSON artifacts.
//!
//! Every CSV starts with `#` comment lines carrying the content hash and the
//! full resolved configuration, followed by an ordinary header row. Numbers
//! use Rust's shortest round-trip formatting, so identical runs produce
//! identical bytes.

use std::io::Write;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::eval::{MetricsReport, PairwiseTest};
use crate::federation::ExperimentReport;
use crate::incremental::IncrementalReport;

pub const METRICS_HEADER: [&str; 10] = [
    "setting",
    "method",
    "lambda",
    "client_id",
    "seed",
    "acc",
    "ece",
    "nll",
    "mc_samples",
    "bins",
];

/// Config hash and resolved config, embedded in every artifact.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub config: ExperimentConfig,
}

impl Provenance {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Provenance {
            tool: "fedproj".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: cfg.content_hash()?,
            config: cfg.clone(),
        })
    }

    fn write_comments<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "# {} {} config_sha256={}", self.tool, self.version, self.config_sha256)?;
        writeln!(out, "# config={}", serde_json::to_string(&self.config)?)?;
        Ok(())
    }
}

fn csv_writer<W: Write>(prov: &Provenance, mut out: W, header: &[&str]) -> Result<csv::Writer<W>> {
    prov.write_comments(&mut out)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    Ok(w)
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn metric_fields(m: &MetricsReport) -> [String; 5] {
    [
        num(m.accuracy),
        num(m.ece),
        num(m.nll),
        m.mc_samples.to_string(),
        m.bins.to_string(),
    ]
}

/// One row per evaluation: `setting, method, lambda, client_id, seed, acc,
/// ece, nll, mc_samples, bins`. Global-model rows leave `lambda` empty; the
/// global-data row of the global model has `client_id = global`.
pub fn write_metrics_csv<W: Write>(prov: &Provenance, reports: &[ExperimentReport], out: W) -> Result<()> {
    let mut w = csv_writer(prov, out, &METRICS_HEADER)?;
    for rep in reports {
        for row in &rep.rows {
            let mut rec = vec![
                row.setting.tag().to_string(),
                rep.method.clone(),
                row.lambda.map(|l| l.to_string()).unwrap_or_default(),
                row.client.map_or_else(|| "global".to_string(), |c| c.to_string()),
                rep.seed.to_string(),
            ];
            rec.extend(metric_fields(&row.metrics));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// λ against client-averaged metrics on local and on global data.
pub fn write_sweep_csv<W: Write>(prov: &Provenance, reports: &[ExperimentReport], out: W) -> Result<()> {
    let mut w = csv_writer(
        prov,
        out,
        &[
            "method",
            "seed",
            "lambda",
            "local_acc",
            "local_ece",
            "local_nll",
            "global_acc",
            "global_ece",
            "global_nll",
        ],
    )?;
    for rep in reports {
        for p in rep.sweep() {
            w.write_record([
                rep.method.clone(),
                rep.seed.to_string(),
                p.lambda.to_string(),
                num(p.local_acc),
                num(p.local_ece),
                num(p.local_nll),
                num(p.global_acc),
                num(p.global_ece),
                num(p.global_nll),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Last-epoch training curves and divergence to the new global posterior.
pub fn write_rounds_csv<W: Write>(prov: &Provenance, reports: &[ExperimentReport], out: W) -> Result<()> {
    let mut w = csv_writer(
        prov,
        out,
        &["method", "seed", "round", "client_id", "nll", "neg_elbo", "divergence_to_global"],
    )?;
    for rep in reports {
        for r in &rep.rounds {
            for (t, d) in r.traces.iter().zip(&r.divergence_to_global) {
                let last = |v: &[f64]| v.last().map(|&x| num(x)).unwrap_or_default();
                w.write_record([
                    rep.method.clone(),
                    rep.seed.to_string(),
                    r.round.to_string(),
                    t.client.to_string(),
                    last(&t.epoch_nll),
                    last(&t.epoch_neg_elbo),
                    num(*d),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Lower-triangular p-value matrix, one row per pair and metric.
/// Degenerate pairs have an empty `p` and `status = degenerate`.
pub fn write_pvalues_csv<W: Write>(prov: &Provenance, tests: &[PairwiseTest], out: W) -> Result<()> {
    let mut w = csv_writer(prov, out, &["method_a", "method_b", "metric", "p", "statistic", "n", "status"])?;
    for t in tests {
        let (p, stat, n, status) = match &t.result {
            Some(r) => (
                num(r.p_value),
                num(r.statistic),
                r.n_effective.to_string(),
                format!("{:?}", r.method).to_lowercase(),
            ),
            None => (String::new(), String::new(), "0".into(), "degenerate".into()),
        };
        w.write_record([t.method_a.clone(), t.method_b.clone(), t.metric.clone(), p, stat, n, status])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_incremental_csv<W: Write>(prov: &Provenance, reports: &[IncrementalReport], out: W) -> Result<()> {
    let mut w = csv_writer(
        prov,
        out,
        &[
            "method",
            "seed",
            "weight",
            "task_a_acc",
            "task_a_ece",
            "task_a_nll",
            "task_b_acc",
            "task_b_ece",
            "task_b_nll",
        ],
    )?;
    for rep in reports {
        for r in &rep.rows {
            w.write_record([
                rep.method.name().to_string(),
                rep.seed.to_string(),
                num(r.weight),
                num(r.task_a.accuracy),
                num(r.task_a.ece),
                num(r.task_a.nll),
                num(r.task_b.accuracy),
                num(r.task_b.ece),
                num(r.task_b.nll),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// JSON document wrapping `body` with the provenance block.
pub fn write_json<W: Write, T: Serialize>(prov: &Provenance, body: &T, out: W) -> Result<()> {
    #[derive(Serialize)]
    struct Doc<'a, T> {
        provenance: &'a Provenance,
        report: &'a T,
    }
    serde_json::to_writer_pretty(out, &Doc { provenance: prov, report: body })?;
    Ok(())
}

/// Parse a CSV written by this module, skipping the comment lines.
pub fn read_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((header, rows))
}
