//! Experiment configuration, read from TOML.
//!
//! Every section is optional except `[dataset]`; omitted values take the
//! defaults below. Unknown keys are rejected so a misspelled hyperparameter
//! can never be silently ignored.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_idx, BlobGenerator, Dataset};
use crate::error::{Error, Result};
use crate::geometry::validate::default_lambda_grid;
use crate::geometry::{AggregationMethod, Divergence, Lambda};
use crate::models::MlpSpec;
use crate::variopt::{DecayKind, IvonHyper, LrSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub partition: PartitionSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default)]
    pub personalization: PersonalizationSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub baseline: BaselineSection,
    #[serde(default)]
    pub compare: CompareSection,
    #[serde(default)]
    pub incremental: IncrementalSection,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synth,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    #[serde(default)]
    pub name: Option<String>,
    // synthetic blobs
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub train_per_class: Option<usize>,
    #[serde(default)]
    pub test_per_class: Option<usize>,
    #[serde(default)]
    pub spread: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    // IDX files
    #[serde(default)]
    pub train_images: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    /// Keep only the first `train_limit` training rows.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    /// Initial Hessian for this dataset; overrides `optimizer.h0`.
    #[serde(default)]
    pub h0: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSection {
    pub clients: usize,
    pub beta: f64,
    pub min_shard: usize,
    /// Split the test set with the training proportions (otherwise every
    /// client's local test set is the full test set).
    pub split_test: bool,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection {
            clients: 10,
            beta: 0.5,
            min_shard: 10,
            split_test: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Hidden widths; input and output widths come from the dataset.
    pub hidden: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub lr_initial: f64,
    pub lr_final: f64,
    pub schedule: DecayKind,
    pub weight_decay: f64,
    pub h0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_radius: Option<f64>,
    pub mc_train: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let h = IvonHyper::default();
        OptimizerSection {
            lr_initial: 0.1,
            lr_final: 0.01,
            schedule: DecayKind::Linear,
            weight_decay: h.weight_decay,
            h0: h.h0,
            beta1: h.beta1,
            beta2: h.beta2,
            clip_radius: None,
            mc_train: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSection {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub method: AggregationMethod,
    /// Train clients concurrently. Output is identical either way.
    pub parallel: bool,
}

impl Default for FederationSection {
    fn default() -> Self {
        FederationSection {
            rounds: 20,
            local_epochs: 1,
            batch_size: 64,
            method: AggregationMethod::W2b,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PersonalizationSection {
    pub divergence: Divergence,
    pub lambdas: Vec<Lambda>,
    /// Also sweep λ after every round, not only the last.
    pub per_round: bool,
}

impl Default for PersonalizationSection {
    fn default() -> Self {
        PersonalizationSection {
            divergence: Divergence::W2Sq,
            lambdas: default_lambda_grid(),
            per_round: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub mc_samples: usize,
    pub ece_bins: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            mc_samples: crate::eval::DEFAULT_MC_SAMPLES,
            ece_bins: crate::eval::DEFAULT_BINS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    /// Variance reported by deterministically trained clients.
    pub frozen_var: f64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection { frozen_var: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    pub methods: Vec<AggregationMethod>,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection {
            methods: AggregationMethod::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IncrementalSection {
    /// Classes below this index form task A, the rest task B.
    pub split_class: Option<usize>,
    /// Barycenter weights on model B, ascending from 0 to 1.
    pub weights: Vec<f64>,
    pub method: AggregationMethod,
    pub epochs: usize,
}

impl Default for IncrementalSection {
    fn default() -> Self {
        IncrementalSection {
            split_class: None,
            weights: (0..=10).map(|i| f64::from(i) / 10.0).collect(),
            method: AggregationMethod::W2b,
            epochs: 20,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let field = e.message().split('`').nth(1).unwrap_or("<document>").to_string();
            Error::config(field, e.to_string().trim_end().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let need = |ok: bool, field: &str, msg: &str| if ok { Ok(()) } else { Err(Error::config(field, msg)) };
        need(!self.seeds.is_empty(), "seeds", "at least one seed is required")?;
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Synth => {
                for (field, v) in [
                    ("dataset.classes", d.classes),
                    ("dataset.dim", d.dim),
                    ("dataset.train_per_class", d.train_per_class),
                    ("dataset.test_per_class", d.test_per_class),
                ] {
                    need(v.is_some(), field, "required when kind = \"synth\"")?;
                    need(v != Some(0), field, "must be positive")?;
                }
                need(
                    d.spread.is_some_and(|s| s.is_finite() && s >= 0.0),
                    "dataset.spread",
                    "required when kind = \"synth\"; must be finite and >= 0",
                )?;
            }
            DatasetKind::Idx => {
                for (field, v) in [
                    ("dataset.train_images", &d.train_images),
                    ("dataset.train_labels", &d.train_labels),
                    ("dataset.test_images", &d.test_images),
                    ("dataset.test_labels", &d.test_labels),
                ] {
                    need(v.is_some(), field, "required when kind = \"idx\"")?;
                }
                for (field, v) in [
                    ("dataset.train_images", &d.train_images),
                    ("dataset.train_labels", &d.train_labels),
                    ("dataset.test_images", &d.test_images),
                    ("dataset.test_labels", &d.test_labels),
                ] {
                    if let Some(path) = v.as_ref().filter(|p| !p.is_file()) {
                        return Err(Error::config(field, format!("file not found: {}", path.display())));
                    }
                }
            }
        }
        if let Some(h0) = d.h0 {
            need(h0.is_finite() && h0 > 0.0, "dataset.h0", "must be positive")?;
        }
        let p = &self.partition;
        need(p.clients >= 1, "partition.clients", "must be >= 1")?;
        need(p.beta.is_finite() && p.beta > 0.0, "partition.beta", "must be finite and > 0")?;
        if let Some(h) = &self.model.hidden {
            need(!h.contains(&0), "model.hidden", "widths must be positive")?;
        }
        let o = &self.optimizer;
        need(o.lr_initial > 0.0 && o.lr_initial.is_finite(), "optimizer.lr_initial", "must be positive")?;
        need(o.lr_final > 0.0 && o.lr_final.is_finite(), "optimizer.lr_final", "must be positive")?;
        need(o.weight_decay > 0.0 && o.weight_decay.is_finite(), "optimizer.weight_decay", "must be positive")?;
        need(o.h0 > 0.0 && o.h0.is_finite(), "optimizer.h0", "must be positive")?;
        need((0.0..1.0).contains(&o.beta1), "optimizer.beta1", "must lie in [0, 1)")?;
        need((0.0..1.0).contains(&o.beta2), "optimizer.beta2", "must lie in [0, 1)")?;
        need(o.clip_radius.is_none_or(|r| r > 0.0), "optimizer.clip_radius", "must be positive")?;
        need(o.mc_train >= 1, "optimizer.mc_train", "must be >= 1")?;
        let f = &self.federation;
        need(f.rounds >= 1, "federation.rounds", "must be >= 1")?;
        need(f.batch_size >= 1, "federation.batch_size", "must be >= 1")?;
        let lambdas = &self.personalization.lambdas;
        need(!lambdas.is_empty(), "personalization.lambdas", "grid must not be empty")?;
        need(
            lambdas.windows(2).all(|w| w[0].value() < w[1].value()),
            "personalization.lambdas",
            "grid must be strictly ascending",
        )?;
        need(
            self.personalization.divergence != Divergence::Kl,
            "personalization.divergence",
            "KL has no closed-form projection; use RKL or W2SQ",
        )?;
        need(self.eval.mc_samples >= 1, "eval.mc_samples", "must be >= 1")?;
        need(self.eval.ece_bins >= 1, "eval.ece_bins", "must be >= 1")?;
        need(
            self.baseline.frozen_var > 0.0 && self.baseline.frozen_var.is_finite(),
            "baseline.frozen_var",
            "must be positive",
        )?;
        let w = &self.incremental.weights;
        need(!w.is_empty(), "incremental.weights", "must not be empty")?;
        need(
            w.iter().all(|v| (0.0..=1.0).contains(v)) && w.windows(2).all(|p| p[0] < p[1]),
            "incremental.weights",
            "must be ascending values in [0, 1]",
        )?;
        Ok(())
    }

    /// Training and test splits.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.dataset;
        match d.kind {
            DatasetKind::Synth => {
                let gen = BlobGenerator::new(
                    d.classes.unwrap_or(0),
                    d.dim.unwrap_or(0),
                    d.spread.unwrap_or(0.0),
                    d.seed.unwrap_or(0),
                )?;
                Ok((
                    gen.sample(d.train_per_class.unwrap_or(0), 0)?,
                    gen.sample(d.test_per_class.unwrap_or(0), 1)?,
                ))
            }
            DatasetKind::Idx => {
                let path = |p: &Option<PathBuf>| p.clone().unwrap_or_default();
                let train = load_idx(&path(&d.train_images), &path(&d.train_labels))?;
                let test = load_idx(&path(&d.test_images), &path(&d.test_labels))?;
                let classes = train.classes().max(test.classes());
                let limit = |ds: Dataset, n: Option<usize>, tag: &str| -> Result<Dataset> {
                    let keep = n.unwrap_or(ds.len()).min(ds.len());
                    let idx: Vec<usize> = (0..keep).collect();
                    let name = d.name.clone().unwrap_or_else(|| ds.name().to_string());
                    let sub = ds.subset(&idx, format!("{name}-{tag}"))?;
                    Dataset::new(sub.name(), sub.inputs().clone(), sub.labels().to_vec(), classes)
                };
                Ok((limit(train, d.train_limit, "train")?, limit(test, d.test_limit, "test")?))
            }
        }
    }

    pub fn model_spec(&self, input_dim: usize, classes: usize) -> Result<MlpSpec> {
        let hidden = self.model.hidden.clone().unwrap_or_else(|| match self.dataset.kind {
            DatasetKind::Synth => vec![32],
            DatasetKind::Idx => vec![200],
        });
        let mut sizes = vec![input_dim];
        sizes.extend(hidden);
        sizes.push(classes);
        MlpSpec::new(sizes)
    }

    /// Optimizer hyperparameters for a client holding `ess` examples.
    pub fn hyper(&self, ess: usize) -> IvonHyper {
        let o = &self.optimizer;
        IvonHyper {
            lr: o.lr_initial,
            weight_decay: o.weight_decay,
            ess,
            beta1: o.beta1,
            beta2: o.beta2,
            h0: self.dataset.h0.unwrap_or(o.h0),
            clip_radius: o.clip_radius,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.optimizer.lr_initial,
            final_lr: self.optimizer.lr_final,
            kind: self.optimizer.schedule,
        }
    }

    /// SHA-256 over the resolved configuration and, for file-backed
    /// datasets, the contents of every input file.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self)?);
        if self.dataset.kind == DatasetKind::Idx {
            for p in [
                &self.dataset.train_images,
                &self.dataset.train_labels,
                &self.dataset.test_images,
                &self.dataset.test_labels,
            ]
            .into_iter()
            .flatten()
            {
                h.update(std::fs::read(p)?);
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [dataset]
        kind = "synth"
        classes = 3
        dim = 2
        train_per_class = 20
        test_per_class = 10
        spread = 0.5
    "#;

    #[test]
    fn defaults_follow_the_reference_hyperparameters() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.optimizer.lr_initial, 0.1);
        assert_eq!(cfg.optimizer.lr_final, 0.01);
        assert_eq!(cfg.optimizer.weight_decay, 2e-4);
        assert_eq!(cfg.federation.batch_size, 64);
        assert_eq!(cfg.optimizer.mc_train, 1);
        assert_eq!(cfg.eval.mc_samples, 10);
        assert_eq!(cfg.eval.ece_bins, 15);
        assert_eq!(cfg.personalization.lambdas, default_lambda_grid());
        assert_eq!(cfg.schedule().at(1.0), 0.01);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = ExperimentConfig::from_toml_str(&format!("{MINIMAL}\n[optimizer]\nlearning_rate = 0.1\n"))
            .unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "learning_rate"), "{err}");
    }

    #[test]
    fn missing_paths_name_the_field() {
        let err = ExperimentConfig::from_toml_str("[dataset]\nkind = \"idx\"\ntrain_images = \"a\"\n").unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "dataset.train_labels"), "{err}");
    }

    #[test]
    fn lambda_grid_accepts_inf() {
        let cfg = ExperimentConfig::from_toml_str(&format!(
            "{MINIMAL}\n[personalization]\nlambdas = [0, 0.5, inf]\n"
        ))
        .unwrap();
        assert_eq!(cfg.personalization.lambdas.last(), Some(&Lambda::Infinity));
        assert!(ExperimentConfig::from_toml_str(&format!(
            "{MINIMAL}\n[personalization]\nlambdas = [1, 0.5]\n"
        ))
        .is_err());
    }

    #[test]
    fn hash_is_stable() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.content_hash().unwrap(), cfg.content_hash().unwrap());
        let mut other = cfg.clone();
        other.seeds = vec![1];
        assert_ne!(cfg.content_hash().unwrap(), other.content_hash().unwrap());
    }
}
