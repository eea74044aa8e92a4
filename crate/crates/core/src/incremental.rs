//! Two-task incremental learning by posterior barycenters.
//!
//! Model A is trained on the first class group and model B on the second;
//! A's data is never revisited. Sweeping the barycenter weight on B traces
//! the trade-off between forgetting task A and learning task B.

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::federation::{client_update, ClientState, LocalTraining};
use crate::geometry::{aggregate, AggregationMethod};
use crate::seeds::{derive_seed, stream};
use crate::variopt::{IvonState, Prior};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementalRow {
    /// Barycenter weight on model B.
    pub weight: f64,
    pub task_a: MetricsReport,
    pub task_b: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementalReport {
    pub seed: u64,
    pub method: AggregationMethod,
    pub split_class: usize,
    pub rows: Vec<IncrementalRow>,
}

impl IncrementalReport {
    /// Interior weights whose model beats model B on task A and model A on
    /// task B at the same time.
    pub fn dominating_weights(&self) -> Vec<f64> {
        let (Some(a), Some(b)) = (self.at(0.0), self.at(1.0)) else {
            return Vec::new();
        };
        self.rows
            .iter()
            .filter(|r| r.weight > 0.0 && r.weight < 1.0)
            .filter(|r| r.task_a.accuracy > b.task_a.accuracy && r.task_b.accuracy > a.task_b.accuracy)
            .map(|r| r.weight)
            .collect()
    }

    pub fn at(&self, weight: f64) -> Option<&IncrementalRow> {
        self.rows.iter().find(|r| r.weight == weight)
    }
}

pub fn run_incremental(cfg: &ExperimentConfig, seed: u64) -> Result<IncrementalReport> {
    let (train, test) = cfg.load_datasets()?;
    let classes = train.classes();
    let split = cfg.incremental.split_class.unwrap_or(classes / 2);
    if split == 0 || split >= classes {
        return Err(Error::config(
            "incremental.split_class",
            format!("must lie in 1..{classes} so both tasks are non-empty"),
        ));
    }
    let in_a = |y: usize| y < split;
    let spec = cfg.model_spec(train.dim(), classes)?;
    let init = spec.init_params(derive_seed(seed, &[2]));
    let inc = &cfg.incremental;

    let mut posteriors = Vec::with_capacity(2);
    let mut tests = Vec::with_capacity(2);
    for (task, keep_a) in [(0u64, true), (1, false)] {
        let tr = train.filter_classes(|y| in_a(y) == keep_a, format!("task-{task}-train"))?;
        let te = test.filter_classes(|y| in_a(y) == keep_a, format!("task-{task}-test"))?;
        let opt = IvonState::new(init.clone(), cfg.hyper(tr.len()))?;
        let prior = Prior::from_decay(spec.param_count(), tr.len(), cfg.optimizer.weight_decay)?;
        let mut client = ClientState::new(task as usize, tr, te.clone(), opt)?;
        let training = LocalTraining {
            epochs: inc.epochs,
            batch_size: cfg.federation.batch_size,
            mc_samples: cfg.optimizer.mc_train,
            schedule: cfg.schedule(),
            epochs_done: 0,
            epochs_total: inc.epochs.max(1),
        };
        let mut rng = stream(seed, &[7, task]);
        client_update(&mut client, None, &spec, &prior, &training, &mut rng)?;
        posteriors.push(client.local_posterior);
        tests.push(te);
    }

    let eval_seed = derive_seed(seed, &[4]);
    let (mc, bins) = (cfg.eval.mc_samples, cfg.eval.ece_bins);
    let rows = inc
        .weights
        .iter()
        .map(|&w| {
            let p = aggregate(inc.method, &posteriors, &[1.0 - w, w])?;
            Ok(IncrementalRow {
                weight: w,
                task_a: evaluate(&spec, &p, &tests[0], mc, bins, eval_seed)?,
                task_b: evaluate(&spec, &p, &tests[1], mc, bins, eval_seed)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(IncrementalReport {
        seed,
        method: inc.method,
        split_class: split,
        rows,
    })
}
