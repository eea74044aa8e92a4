//! IDX reader (the MNIST family's container format).
//!
//! Images: big-endian `u32` magic `0x0803`, count, rows, cols, then one byte
//! per pixel. Labels: magic `0x0801`, count, then one byte per label.

use std::path::Path;

use ndarray::Array2;

use super::Dataset;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::IdxTruncated(format!("{what} header")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0, "magic")?;
    if found != expected {
        return Err(Error::IdxBadMagic { expected, found });
    }
    Ok(())
}

/// Pixels scaled to `[0, 1]`, one image per row.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Array2<f64>> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    let dim = rows * cols;
    let body = &bytes[16..];
    if body.len() < n * dim {
        return Err(Error::IdxTruncated(format!(
            "images: expected {} pixel bytes, found {}",
            n * dim,
            body.len()
        )));
    }
    let pixels = body[..n * dim].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Array2::from_shape_vec((n, dim), pixels).expect("length checked"))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = be_u32(bytes, 4, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::IdxTruncated(format!("labels: expected {n} bytes, found {}", body.len())));
    }
    Ok(body[..n].iter().map(|&b| usize::from(b)).collect())
}

/// Load an image file and its label file. The class count is the largest
/// label plus one.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let inputs = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    if inputs.nrows() != labels.len() {
        return Err(Error::IdxCountMismatch {
            images: inputs.nrows(),
            labels: labels.len(),
        });
    }
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(name, inputs, labels, classes)
}
