use std::fs;
use std::path::Path;

use super::{class_counts, long_tail_indices, lt_profile, LabeledDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Coarse label, fine label, then 3×32×32 channel-major pixels.
pub const CIFAR_RECORD_BYTES: usize = 2 + 3072;
const CLASSES: usize = 100;

/// Parses a CIFAR-100 binary file into `[N, 3, 32, 32]` images and fine labels.
pub fn parse_cifar100(bytes: &[u8]) -> Result<(Tensor<u8>, Vec<usize>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Format(format!(
            "CIFAR-100 file has {} bytes, not a positive multiple of {CIFAR_RECORD_BYTES}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut images = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let fine = rec[1] as usize;
        if fine >= CLASSES {
            return Err(Error::Format(format!("record {i} has fine label {fine}")));
        }
        labels.push(fine);
        images.extend_from_slice(&rec[2..]);
    }
    Ok((Tensor::new(vec![n, 3, 32, 32], images)?, labels))
}

/// Loads a CIFAR-100 binary file and draws the long-tailed subset with
/// `n_max` equal to the smallest class count. `ratio = 1` keeps every record.
pub fn ingest_cifar100_binary(path: impl AsRef<Path>, ratio: f64, seed: u64) -> Result<LabeledDataset> {
    if !(ratio >= 1.0) {
        return Err(Error::Config(format!("imbalance ratio must be at least 1, got {ratio}")));
    }
    let (images, labels) = parse_cifar100(&fs::read(path)?)?;
    let names = (0..CLASSES).map(|k| format!("class_{k}")).collect();
    let full = LabeledDataset::new(images, labels, names)?;
    if ratio == 1.0 {
        return Ok(full);
    }
    let n_max = class_counts(full.labels(), CLASSES).into_iter().min().unwrap_or(0);
    let keep = long_tail_indices(full.labels(), &lt_profile(CLASSES, n_max, ratio), seed)?;
    full.subset(&keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_layout() {
        let mut rec = vec![7u8, 42];
        rec.extend((0..3072).map(|i| (i % 251) as u8));
        let (imgs, labels) = parse_cifar100(&rec).unwrap();
        assert_eq!(labels, vec![42]);
        assert_eq!(imgs.shape(), &[1, 3, 32, 32]);
        assert_eq!(imgs.data()[1024], (1024 % 251) as u8);
    }

    #[test]
    fn wrong_size_is_format_error() {
        assert!(matches!(parse_cifar100(&[0u8; 3075]), Err(Error::Format(_))));
    }
}
