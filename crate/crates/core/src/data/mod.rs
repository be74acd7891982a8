//! Labeled image datasets, their archive layout, and image preprocessing.
//!
//! Dataset archive entries:
//!
//! ```text
//! data.images        uint8 [N, 3, S, S]
//! data.labels        int64 [N]
//! test.images        uint8 [M, 3, S, S]   (optional)
//! test.labels        int64 [M]            (optional)
//! meta.class_count   int64 scalar
//! meta.norm_mean     float64 [3]
//! meta.norm_std      float64 [3]
//! meta.class_name.<k>  uint8 UTF-8
//! ```

mod augment;
mod cifar;
mod synthetic;

pub use augment::{augment_train, preprocess_eval, AugmentConfig};
pub use cifar::{ingest_cifar100_binary, parse_cifar100, CIFAR_RECORD_BYTES};
pub use synthetic::{generate_synthetic_lt, SyntheticLtSpec};

use std::path::Path;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::metrics::ShotSplits;
use crate::rng::RngStream;
use crate::tensor::{AnyTensor, Float, Tensor};

pub const DEFAULT_NORM: [f64; 3] = [0.5, 0.5, 0.5];

/// Images with class labels. Images are stored as uint8 and scaled to `[0, 1]` on access.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Tensor<u8>,
    labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
}

impl LabeledDataset {
    pub fn new(images: Tensor<u8>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        match *images.shape() {
            [n, 3, h, w] if h == w && h > 0 => {
                if n != labels.len() {
                    return Err(Error::Format(format!("{n} images but {} labels", labels.len())));
                }
            }
            _ => return Err(Error::Format(format!("images must be [N, 3, S, S], got {:?}", images.shape()))),
        }
        let k = class_names.len();
        if let Some(&y) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Format(format!("label {y} outside {k} classes")));
        }
        Ok(LabeledDataset { images, labels, class_names, norm_mean: DEFAULT_NORM, norm_std: DEFAULT_NORM })
    }

    pub fn with_norm(mut self, mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!("normalization std must be positive, got {std:?}")));
        }
        self.norm_mean = mean;
        self.norm_std = std;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor<u8> {
        &self.images
    }

    /// Samples per class.
    pub fn counts(&self) -> Vec<usize> {
        class_counts(&self.labels, self.classes())
    }

    pub fn shot_splits(&self) -> ShotSplits {
        ShotSplits::from_counts(&self.counts())
    }

    pub fn image_bytes(&self, i: usize) -> &[u8] {
        let s = self.image_size();
        let n = 3 * s * s;
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Image `i` as floats in `[0, 1]`.
    pub fn image<T: Float>(&self, i: usize) -> Tensor<T> {
        let s = self.image_size();
        let inv = 1.0 / 255.0;
        let data = self.image_bytes(i).iter().map(|&b| T::from_f64(b as f64 * inv)).collect();
        Tensor::new(vec![3, s, s], data).expect("image shape")
    }

    /// Per-channel `(x − mean) / std` in place.
    pub fn normalize<T: Float>(&self, image: &mut Tensor<T>) {
        let plane = image.numel() / 3;
        for (c, chunk) in image.data_mut().chunks_mut(plane).enumerate() {
            let (m, s) = (T::from_f64(self.norm_mean[c]), T::from_f64(self.norm_std[c]));
            for v in chunk {
                *v = (*v - m) / s;
            }
        }
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let n = 3 * self.image_size() * self.image_size();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Contract(format!("index {i} outside {} samples", self.len())));
            }
            data.extend_from_slice(self.image_bytes(i));
            labels.push(self.labels[i]);
        }
        let s = self.image_size();
        let images = Tensor::new(vec![indices.len(), 3, s, s], data)?;
        Ok(LabeledDataset { images, labels, ..self.clone_meta() })
    }

    fn clone_meta(&self) -> Self {
        LabeledDataset {
            images: Tensor::zeros(vec![0, 3, 1, 1]),
            labels: Vec::new(),
            class_names: self.class_names.clone(),
            norm_mean: self.norm_mean,
            norm_std: self.norm_std,
        }
    }
}

pub fn class_counts(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut c = vec![0; classes];
    for &y in labels {
        c[y] += 1;
    }
    c
}

/// `n_k = max(1, round(n_max · ρ^(−k/(K−1))))` for `k = 0..K`.
pub fn lt_profile(classes: usize, n_max: usize, ratio: f64) -> Vec<usize> {
    (0..classes)
        .map(|k| {
            let e = if classes > 1 { k as f64 / (classes - 1) as f64 } else { 0.0 };
            ((n_max as f64 * ratio.powf(-e)).round() as usize).max(1)
        })
        .collect()
}

/// Picks `profile[k]` samples of each class (uniformly without replacement,
/// seeded per class) and returns their indices in original order.
pub fn long_tail_indices(labels: &[usize], profile: &[usize], seed: u64) -> Result<Vec<usize>> {
    let root = RngStream::new(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); profile.len()];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut keep = Vec::new();
    for (k, idx) in by_class.iter().enumerate() {
        let want = profile[k];
        if idx.len() < want {
            return Err(Error::Contract(format!("class {k} has {} samples, profile needs {want}", idx.len())));
        }
        let perm = root.split(k as u64).permutation(idx.len());
        keep.extend(perm[..want].iter().map(|&j| idx[j]));
    }
    keep.sort_unstable();
    Ok(keep)
}

/// A training set plus an optional held-out test set sharing class metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: LabeledDataset,
    pub test: Option<LabeledDataset>,
}

impl DatasetBundle {
    /// Test split if present, else the training split.
    pub fn eval_split(&self) -> &LabeledDataset {
        self.test.as_ref().unwrap_or(&self.train)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        let t = &self.train;
        put_split(&mut a, "data", t);
        if let Some(test) = &self.test {
            put_split(&mut a, "test", test);
        }
        a.insert_scalar_i64("meta.class_count", t.classes() as i64);
        a.insert("meta.norm_mean", AnyTensor::F64(Tensor::from_vec(t.norm_mean.to_vec())));
        a.insert("meta.norm_std", AnyTensor::F64(Tensor::from_vec(t.norm_std.to_vec())));
        for (k, n) in t.class_names.iter().enumerate() {
            a.insert_bytes(format!("meta.class_name.{k}"), n.as_bytes());
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let k = a.require_scalar_i64("meta.class_count")?;
        if k < 1 {
            return Err(Error::Format(format!("meta.class_count is {k}")));
        }
        let names = (0..k as usize)
            .map(|i| a.require_string(&format!("meta.class_name.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let triple = |name: &str| -> Result<[f64; 3]> {
            let t = a.require_float::<f64>(name)?;
            t.data()
                .try_into()
                .map_err(|_| Error::Format(format!("entry \"{name}\" must hold 3 values")))
        };
        let (mean, std) = (triple("meta.norm_mean")?, triple("meta.norm_std")?);
        let read = |prefix: &str| -> Result<LabeledDataset> {
            let images = a
                .require(&format!("{prefix}.images"))?
                .as_u8()
                .map_err(|_| Error::Format(format!("entry \"{prefix}.images\" must be uint8")))?
                .clone();
            let labels = a
                .require(&format!("{prefix}.labels"))?
                .as_i64()
                .map_err(|_| Error::Format(format!("entry \"{prefix}.labels\" must be int64")))?;
            let labels = labels
                .data()
                .iter()
                .map(|&y| usize::try_from(y).map_err(|_| Error::Format(format!("negative label {y}"))))
                .collect::<Result<Vec<_>>>()?;
            LabeledDataset::new(images, labels, names.clone())?
                .with_norm(mean, std)
                .map_err(|e| Error::Format(e.to_string()))
        };
        let train = read("data")?;
        let test = if a.get("test.images").is_some() { Some(read("test")?) } else { None };
        if let Some(t) = &test {
            if t.image_size() != train.image_size() {
                return Err(Error::Format("train and test images differ in size".into()));
            }
        }
        Ok(DatasetBundle { train, test })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

fn put_split(a: &mut Archive, prefix: &str, d: &LabeledDataset) {
    a.insert(format!("{prefix}.images"), AnyTensor::U8(d.images.clone()));
    let labels = d.labels.iter().map(|&y| y as i64).collect();
    a.insert(format!("{prefix}.labels"), AnyTensor::I64(Tensor::from_vec(labels)));
}
