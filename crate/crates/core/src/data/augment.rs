use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::Result;
use crate::rng::RngStream;
use crate::tensor::{Float, Tensor};
use crate::tte::{five_crops, hflip, resize_bilinear, crop, TteConfig};

fn yes() -> bool {
    true
}

fn default_min_scale() -> f64 {
    0.35
}

fn default_flip() -> f64 {
    0.5
}

/// Train-time augmentation: random resized crop, then horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default = "yes")]
    pub random_crop: bool,
    /// Smallest crop area as a fraction of the image.
    #[serde(default = "default_min_scale")]
    pub min_scale: f64,
    #[serde(default = "default_flip")]
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { random_crop: true, min_scale: default_min_scale(), flip_prob: default_flip() }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig { random_crop: false, min_scale: 1.0, flip_prob: 0.0 }
    }

    /// Whether the augmented image can differ from the eval image.
    pub fn is_random(&self) -> bool {
        self.random_crop || self.flip_prob > 0.0
    }
}

/// Augments a `[3, S, S]` float image and resizes it to `input_size`.
pub fn augment_train<T: Float>(
    image: &Tensor<T>,
    input_size: usize,
    cfg: &AugmentConfig,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = None;
    if cfg.random_crop {
        let area = (h * w) as f64;
        for _ in 0..10 {
            let a = area * rng.uniform_range(cfg.min_scale, 1.0);
            let ratio = rng.uniform_range((3f64 / 4.0).ln(), (4f64 / 3.0).ln()).exp();
            let cw = (a * ratio).sqrt().round() as usize;
            let ch = (a / ratio).sqrt().round() as usize;
            if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
                let top = rng.below(h - ch + 1);
                let left = rng.below(w - cw + 1);
                out = Some(crop(image, top, left, ch, cw)?);
                break;
            }
        }
    }
    let img = resize_bilinear(out.as_ref().unwrap_or(image), input_size, input_size)?;
    if cfg.flip_prob > 0.0 && rng.bernoulli(cfg.flip_prob) {
        hflip(&img)
    } else {
        Ok(img)
    }
}

/// Normalized eval views of sample `i`: one resized image, or five crops when TTE is active.
pub fn preprocess_eval<T: Float>(
    ds: &LabeledDataset,
    i: usize,
    input_size: usize,
    tte: &TteConfig,
) -> Result<Vec<Tensor<T>>> {
    let img = ds.image::<T>(i);
    let mut views = if tte.active() {
        five_crops(&img, input_size, tte.expand)?
    } else {
        vec![resize_bilinear(&img, input_size, input_size)?]
    };
    for v in &mut views {
        ds.normalize(v);
    }
    Ok(views)
}
