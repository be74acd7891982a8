//! Five-crop test-time ensembling and the image geometry it relies on.
//!
//! Images are float `[3, H, W]` tensors.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Float, Tensor};

pub const DEFAULT_EXPAND: usize = 24;
/// Number of crops averaged.
pub const CROPS: usize = 5;

fn default_expand() -> usize {
    DEFAULT_EXPAND
}

fn default_enabled() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TteConfig {
    #[serde(default = "default_expand")]
    pub expand: usize,
    #[serde(default = "default_enabled")]
    pub enabled: bool,
}

impl Default for TteConfig {
    fn default() -> Self {
        TteConfig { expand: DEFAULT_EXPAND, enabled: true }
    }
}

impl TteConfig {
    pub fn off() -> Self {
        TteConfig { expand: DEFAULT_EXPAND, enabled: false }
    }

    pub fn with_expand(expand: usize) -> Self {
        TteConfig { expand, enabled: true }
    }

    /// Whether evaluation uses five crops. `e = 0` means a single crop.
    pub fn active(&self) -> bool {
        self.enabled && self.expand > 0
    }
}

/// Warning text when `e` is a positive multiple of the patch size.
pub fn validate_expand(expand: usize, patch_size: usize) -> Option<String> {
    (expand > 0 && patch_size > 0 && expand % patch_size == 0).then(|| {
        format!(
            "TTE expand {expand} is a multiple of the patch size {patch_size}; \
             the corner crops will share patch grids and add little diversity"
        )
    })
}

/// `(row, col)` offsets: center, top-left, top-right, bottom-left, bottom-right.
pub fn crop_offsets(expand: usize) -> [(usize, usize); CROPS] {
    let c = expand / 2;
    [(c, c), (0, 0), (0, expand), (expand, 0), (expand, expand)]
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear<T: Float>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = chw(image)?;
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    if out_h == 0 || out_w == 0 {
        return Err(dim_err!("cannot resize to {out_h}×{out_w}"));
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(h, out_h);
    let xs = axis(w, out_w);
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let p = |y: usize, x: usize| plane[y * w + x].to_f64();
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(T::from_f64(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// The `h × w` window at `(top, left)`.
pub fn crop<T: Float>(image: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let (c, ih, iw) = chw(image)?;
    if top + h > ih || left + w > iw {
        return Err(dim_err!("crop {h}×{w} at ({top}, {left}) exceeds a {ih}×{iw} image"));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in top..top + h {
            let row = (ch * ih + y) * iw;
            out.extend_from_slice(&src[row + left..row + left + w]);
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Mirror left-right.
pub fn hflip<T: Float>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, w) = chw(image)?;
    let mut out = image.data().to_vec();
    for row in out.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Resize to `(input_size + e)²` and cut the five `input_size²` crops.
pub fn five_crops<T: Float>(image: &Tensor<T>, input_size: usize, expand: usize) -> Result<Vec<Tensor<T>>> {
    let big = input_size + expand;
    let r = resize_bilinear(image, big, big)?;
    crop_offsets(expand)
        .iter()
        .map(|&(y, x)| crop(&r, y, x, input_size, input_size))
        .collect()
}

/// Arithmetic mean of exactly five logit vectors, summed in index order.
pub fn ensemble_logits<T: Float>(crops: &[Tensor<T>]) -> Result<Tensor<T>> {
    if crops.len() != CROPS {
        return Err(Error::Contract(format!("ensembling needs {CROPS} crop logits, got {}", crops.len())));
    }
    let k = crops[0].numel();
    let mut acc = vec![T::ZERO; k];
    for c in crops {
        if c.shape() != crops[0].shape() {
            return Err(dim_err!("crop logits {:?} and {:?} differ", c.shape(), crops[0].shape()));
        }
        for (a, &v) in acc.iter_mut().zip(c.data()) {
            *a += v;
        }
    }
    let n = T::from_f64(CROPS as f64);
    Tensor::new(crops[0].shape().to_vec(), acc.into_iter().map(|v| v / n).collect())
}

fn chw<T: crate::tensor::Element>(image: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] if h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(dim_err!("expected a [C, H, W] image, got {:?}", image.shape())),
    }
}
