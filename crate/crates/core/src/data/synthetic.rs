use serde::{Deserialize, Serialize};

use super::{lt_profile, DatasetBundle, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

const BLOBS: usize = 2;
const BACKGROUND: f64 = 0.5;

fn default_test_per_class() -> usize {
    20
}

fn default_noise() -> f64 {
    0.08
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLtSpec {
    pub classes: usize,
    pub n_max: usize,
    /// Imbalance ratio ρ = n_0 / n_{K−1}.
    pub ratio: f64,
    pub image_size: usize,
    pub seed: u64,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    /// Per-pixel Gaussian noise std, in `[0, 1]` intensity units.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

impl SyntheticLtSpec {
    pub fn new(classes: usize, n_max: usize, ratio: f64, image_size: usize, seed: u64) -> Self {
        SyntheticLtSpec {
            classes,
            n_max,
            ratio,
            image_size,
            seed,
            test_per_class: default_test_per_class(),
            noise: default_noise(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.n_max == 0 || self.image_size == 0 {
            return Err(Error::Config("classes, n_max and image_size must be positive".into()));
        }
        if !(self.ratio >= 1.0) {
            return Err(Error::Config(format!("imbalance ratio must be at least 1, got {}", self.ratio)));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }

    pub fn train_counts(&self) -> Vec<usize> {
        lt_profile(self.classes, self.n_max, self.ratio)
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    color: [f64; 3],
}

fn prototype(rng: &mut RngStream, size: usize) -> Vec<Blob> {
    let s = size as f64;
    (0..BLOBS)
        .map(|_| Blob {
            cy: rng.uniform_range(0.15, 0.85) * s,
            cx: rng.uniform_range(0.15, 0.85) * s,
            sigma: rng.uniform_range(0.10, 0.22) * s,
            color: [rng.uniform(), rng.uniform(), rng.uniform()],
        })
        .collect()
}

fn render(blobs: &[Blob], size: usize, noise: f64, rng: &mut RngStream, out: &mut Vec<u8>) {
    let dy = rng.uniform_range(-1.0, 1.0);
    let dx = rng.uniform_range(-1.0, 1.0);
    let gain = 1.0 + 0.1 * rng.normal();
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let (py, px) = (y as f64 + 0.5 - dy, x as f64 + 0.5 - dx);
                let mut v = BACKGROUND;
                for b in blobs {
                    let r2 = (py - b.cy).powi(2) + (px - b.cx).powi(2);
                    v += gain * (b.color[c] - BACKGROUND) * (-r2 / (2.0 * b.sigma * b.sigma)).exp();
                }
                v += noise * rng.normal();
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
}

fn render_split(protos: &[Vec<Blob>], counts: &[usize], spec: &SyntheticLtSpec, rng: &RngStream) -> Result<LabeledDataset> {
    let s = spec.image_size;
    let n: usize = counts.iter().sum();
    let mut data = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    for (k, &nk) in counts.iter().enumerate() {
        let mut r = rng.split(k as u64);
        for _ in 0..nk {
            render(&protos[k], s, spec.noise, &mut r, &mut data);
            labels.push(k);
        }
    }
    let names = (0..spec.classes).map(|k| format!("class_{k}")).collect();
    LabeledDataset::new(Tensor::new(vec![n, 3, s, s], data)?, labels, names)
}

/// Long-tailed training set plus a balanced test set. Each class is a fixed
/// arrangement of colored Gaussian blobs; samples add jitter and pixel noise.
pub fn generate_synthetic_lt(spec: &SyntheticLtSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let root = RngStream::new(spec.seed);
    let protos: Vec<Vec<Blob>> = (0..spec.classes)
        .map(|k| prototype(&mut root.split(1).split(k as u64), spec.image_size))
        .collect();
    let train = render_split(&protos, &spec.train_counts(), spec, &root.split(2))?;
    let test = render_split(&protos, &vec![spec.test_per_class; spec.classes], spec, &root.split(3))?;
    Ok(DatasetBundle { train, test: (spec.test_per_class > 0).then_some(test) })
}
