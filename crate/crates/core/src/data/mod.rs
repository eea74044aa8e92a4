//! Labelled datasets, loaders and non-i.i.d. client partitioning.

mod idx;
mod partition;
mod synth;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use idx::{load_idx, parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use partition::{apply_proportions, dirichlet_partition, Partition, PartitionConfig, ShardManifest};
pub use synth::{synth_blobs, BlobGenerator};

/// Feature matrix with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    classes: usize,
    name: String,
}

impl Dataset {
    pub fn new(name: impl Into<String>, inputs: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if inputs.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.nrows(),
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
            name: name.into(),
        })
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        histogram(&self.labels, self.classes)
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::InvalidArgument(format!("index {bad} out of range for {} rows", self.len())));
        }
        Dataset::new(
            name,
            self.inputs.select(Axis(0), indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.classes,
        )
    }

    /// Rows whose label satisfies `keep`.
    pub fn filter_classes(&self, keep: impl Fn(usize) -> bool, name: impl Into<String>) -> Result<Dataset> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        self.subset(&idx, name)
    }

    /// Stack several datasets with the same width and class count.
    pub fn concat(parts: &[Dataset], name: impl Into<String>) -> Result<Dataset> {
        let first = parts.first().ok_or(Error::Empty("dataset list"))?;
        let views: Vec<_> = parts.iter().map(|p| p.inputs.view()).collect();
        let inputs = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::InvalidArgument(format!("cannot stack datasets: {e}")))?;
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        Dataset::new(name, inputs, labels, first.classes)
    }
}

pub(crate) fn histogram(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for &y in labels {
        h[y] += 1;
    }
    h
}

/// Summary written alongside experiment outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub name: String,
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
}

impl From<&Dataset> for DatasetSummary {
    fn from(ds: &Dataset) -> Self {
        DatasetSummary {
            name: ds.name.clone(),
            n: ds.len(),
            dim: ds.dim(),
            classes: ds.classes,
        }
    }
}
