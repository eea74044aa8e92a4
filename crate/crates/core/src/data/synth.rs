//! Gaussian blobs: one isotropic cluster per class.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::error::{Error, Result};
use crate::seeds::stream;

/// Fixed cluster centres; draw as many samples from them as needed.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobGenerator {
    centers: Array2<f64>,
    spread: f64,
    seed: u64,
}

impl BlobGenerator {
    /// Centres are uniform in `[-1, 1]^dim`; `spread` is the per-axis
    /// standard deviation around each centre.
    pub fn new(classes: usize, dim: usize, spread: f64, seed: u64) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return Err(Error::InvalidArgument("blobs need at least one class and one dimension".into()));
        }
        if !(spread.is_finite() && spread >= 0.0) {
            return Err(Error::InvalidArgument(format!("spread {spread} must be finite and >= 0")));
        }
        let mut rng = stream(seed, &[0]);
        let centers = Array2::from_shape_fn((classes, dim), |_| rng.random_range(-1.0..1.0));
        Ok(BlobGenerator { centers, spread, seed })
    }

    pub fn centers(&self) -> &Array2<f64> {
        &self.centers
    }

    /// `n_per_class` points of every class, grouped by class. Different
    /// `draw` values give independent samples around the same centres.
    pub fn sample(&self, n_per_class: usize, draw: u64) -> Result<Dataset> {
        if n_per_class == 0 {
            return Err(Error::Empty("blob sample"));
        }
        let (classes, dim) = self.centers.dim();
        let mut rng = stream(self.seed, &[1, draw]);
        let n = classes * n_per_class;
        let mut inputs = Array2::zeros((n, dim));
        let mut labels = Vec::with_capacity(n);
        for c in 0..classes {
            for i in 0..n_per_class {
                let r = c * n_per_class + i;
                for j in 0..dim {
                    let eps: f64 = rng.sample(StandardNormal);
                    inputs[[r, j]] = self.centers[[c, j]] + self.spread * eps;
                }
                labels.push(c);
            }
        }
        Dataset::new(format!("blobs-{}", self.seed), inputs, labels, classes)
    }
}

pub fn synth_blobs(n_per_class: usize, classes: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    BlobGenerator::new(classes, dim, spread, seed)?.sample(n_per_class, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_seeded() {
        let ds = synth_blobs(100, 3, 2, 0.5, 1).unwrap();
        assert_eq!(ds.len(), 300);
        assert_eq!(ds.class_histogram(), vec![100, 100, 100]);
        assert_eq!(ds, synth_blobs(100, 3, 2, 0.5, 1).unwrap());
        assert_ne!(ds, synth_blobs(100, 3, 2, 0.5, 2).unwrap());
    }

    #[test]
    fn draws_share_centres() {
        let g = BlobGenerator::new(4, 3, 0.1, 9).unwrap();
        let (a, b) = (g.sample(10, 0).unwrap(), g.sample(10, 1).unwrap());
        assert_ne!(a, b);
        assert_eq!(a.labels(), b.labels());
        assert!(BlobGenerator::new(0, 2, 0.1, 0).is_err());
        assert!(BlobGenerator::new(2, 2, -1.0, 0).is_err());
    }
}
