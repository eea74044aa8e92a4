//! Per-class Dirichlet partitioning.
//!
//! For every class, client proportions are drawn from `Dirichlet(β·1)` and
//! the class's (shuffled) examples are cut at the cumulative proportions.
//! Small `β` concentrates each class on few clients. If any client ends up
//! with fewer than `min_shard` examples the whole draw is repeated, up to
//! [`MAX_ATTEMPTS`] times.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{histogram, Dataset};
use crate::error::{Error, Result};
use crate::seeds::stream;

pub const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub n_clients: usize,
    pub beta: f64,
    pub seed: u64,
    #[serde(default = "default_min_shard")]
    pub min_shard: usize,
}

fn default_min_shard() -> usize {
    10
}

impl PartitionConfig {
    pub fn new(n_clients: usize, beta: f64, seed: u64) -> Self {
        PartitionConfig {
            n_clients,
            beta,
            seed,
            min_shard: default_min_shard(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::InvalidArgument("n_clients must be >= 1".into()));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::InvalidArgument(format!("beta {} must be finite and > 0", self.beta)));
        }
        Ok(())
    }
}

/// Result of a partition: shard indices plus the per-class proportions that
/// produced them, so the same split can be applied to held-out data.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Sorted row indices of each client's shard.
    pub indices: Vec<Vec<usize>>,
    /// `proportions[class][client]`.
    pub proportions: Vec<Vec<f64>>,
    pub attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub client_id: usize,
    pub indices: Vec<usize>,
    pub class_histogram: Vec<usize>,
}

impl Partition {
    pub fn shards(&self, ds: &Dataset) -> Result<Vec<Dataset>> {
        self.indices
            .iter()
            .enumerate()
            .map(|(k, idx)| ds.subset(idx, format!("{}/client-{k}", ds.name())))
            .collect()
    }

    pub fn manifests(&self, ds: &Dataset) -> Vec<ShardManifest> {
        self.indices
            .iter()
            .enumerate()
            .map(|(client_id, idx)| ShardManifest {
                client_id,
                indices: idx.clone(),
                class_histogram: histogram(&idx.iter().map(|&i| ds.labels()[i]).collect::<Vec<_>>(), ds.classes()),
            })
            .collect()
    }
}

fn dirichlet<R: Rng>(beta: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("beta validated");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|g| g / total).collect()
    } else {
        // Every draw underflowed: all mass on one client.
        let mut p = vec![0.0; k];
        p[rng.random_range(0..k)] = 1.0;
        p
    }
}

fn class_members(labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    members
}

/// Cut `members` (already shuffled) at the cumulative proportions.
fn split_class(members: &[usize], proportions: &[f64], shards: &mut [Vec<usize>]) {
    let n = members.len();
    let mut start = 0;
    let mut cumulative = 0.0;
    for (k, p) in proportions.iter().enumerate() {
        cumulative += p;
        let end = if k + 1 == proportions.len() {
            n
        } else {
            ((cumulative * n as f64).round() as usize).clamp(start, n)
        };
        shards[k].extend_from_slice(&members[start..end]);
        start = end;
    }
}

fn split_all(
    labels: &[usize],
    classes: usize,
    proportions: &[Vec<f64>],
    n_clients: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut shards = vec![Vec::new(); n_clients];
    for (members, props) in class_members(labels, classes).iter_mut().zip(proportions) {
        members.shuffle(rng);
        split_class(members, props, &mut shards);
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    shards
}

pub fn dirichlet_partition(ds: &Dataset, cfg: &PartitionConfig) -> Result<Partition> {
    cfg.validate()?;
    let k = cfg.n_clients;
    let mut rng = stream(cfg.seed, &[0xD1]);
    for attempt in 1..=MAX_ATTEMPTS {
        let proportions: Vec<Vec<f64>> = (0..ds.classes()).map(|_| dirichlet(cfg.beta, k, &mut rng)).collect();
        let indices = split_all(ds.labels(), ds.classes(), &proportions, k, &mut rng);
        if indices.iter().all(|s| s.len() >= cfg.min_shard) {
            if attempt > 1 {
                log::info!("dirichlet partition accepted after {attempt} attempts");
            }
            return Ok(Partition {
                indices,
                proportions,
                attempts: attempt,
            });
        }
    }
    Err(Error::PartitionExhausted {
        attempts: MAX_ATTEMPTS,
        min_shard: cfg.min_shard,
    })
}

/// Split another dataset (typically the test split) with an existing
/// partition's class proportions. No minimum shard size is enforced.
pub fn apply_proportions(ds: &Dataset, partition: &Partition, seed: u64) -> Result<Vec<Vec<usize>>> {
    if partition.proportions.len() != ds.classes() {
        return Err(Error::DimensionMismatch {
            expected: partition.proportions.len(),
            actual: ds.classes(),
        });
    }
    let mut rng = stream(seed, &[0xD2]);
    Ok(split_all(
        ds.labels(),
        ds.classes(),
        &partition.proportions,
        partition.indices.len(),
        &mut rng,
    ))
}
