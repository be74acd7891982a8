use super::BackboneParams;
use crate::error::{dim_err, Result};
use crate::parallel;
use crate::session::{Owner, Session};
use crate::tensor::{Float, Tensor, Var};

/// Attention projections a low-rank update may target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraSite {
    #[serde(alias = "Q")]
    Q,
    #[serde(alias = "V")]
    V,
}

/// Insertion points a PEFT module can use inside a block.
///
/// Defaults leave the block untouched.
pub trait BlockHooks<T: Float>: Sync {
    /// Rewrites the sequence entering block `layer` (prompt insertion).
    fn block_input(&self, _s: &mut Session<T>, _layer: usize, x: Var) -> Result<Var> {
        Ok(x)
    }

    /// Additive term for the Q or V projection of the normalized input `h`.
    fn projection_delta(&self, _s: &mut Session<T>, _layer: usize, _site: LoraSite, _h: Var) -> Result<Option<Var>> {
        Ok(None)
    }

    /// Rewrites the FFN output before the residual add (sequential adapter).
    fn ffn_output(&self, _s: &mut Session<T>, _layer: usize, f: Var) -> Result<Var> {
        Ok(f)
    }

    /// Extra branch computed from the post-attention sequence and added to the block output.
    fn parallel_branch(&self, _s: &mut Session<T>, _layer: usize, _x_hat: Var) -> Result<Option<Var>> {
        Ok(None)
    }
}

/// The detached backbone.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoHooks;

impl<T: Float> BlockHooks<T> for NoHooks {}

/// Splits a `[3, S, S]` image into `m` row-major patches of `3·p²` values
/// (channel, then row, then column within the patch).
pub fn patchify<T: Float>(image: &Tensor<T>, image_size: usize, patch: usize) -> Result<Tensor<T>> {
    if image.shape() != [3, image_size, image_size] {
        return Err(dim_err!(
            "image has shape {:?}, backbone expects [3, {image_size}, {image_size}]",
            image.shape()
        ));
    }
    let g = image_size / patch;
    let pd = 3 * patch * patch;
    let src = image.data();
    let mut out = Vec::with_capacity(g * g * pd);
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..3 {
                for py in 0..patch {
                    let row = (c * image_size + gy * patch + py) * image_size + gx * patch;
                    out.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(vec![g * g, pd], out)
}

/// Patch projection, class token and positional embedding: `[m+1, d]`.
pub fn embed<T: Float>(s: &mut Session<T>, image: &Tensor<T>, params: &BackboneParams<T>) -> Result<Var> {
    let cfg = &params.config;
    let patches = patchify(image, cfg.image_size, cfg.patch_size)?;
    let st = &params.store;
    let p = s.tape.constant(patches);
    let w = s.bind(Owner::Backbone, params.patch_proj, st);
    let e = s.tape.matmul(p, w)?;
    let cls = s.bind(Owner::Backbone, params.cls, st);
    let cls = s.tape.reshape(cls, &[1, cfg.dim])?;
    let x = s.tape.concat(&[cls, e], 0)?;
    let pos = s.bind(Owner::Backbone, params.pos, st);
    s.tape.add(x, pos)
}

fn linear<T: Float>(s: &mut Session<T>, x: Var, w: usize, b: usize, params: &BackboneParams<T>) -> Result<Var> {
    let wv = s.bind(Owner::Backbone, w, &params.store);
    let bv = s.bind(Owner::Backbone, b, &params.store);
    let y = s.tape.matmul(x, wv)?;
    s.tape.add(y, bv)
}

/// One pre-norm transformer block with residuals around attention and FFN.
pub fn block_forward<T: Float>(
    s: &mut Session<T>,
    x: Var,
    params: &BackboneParams<T>,
    layer: usize,
    hooks: &dyn BlockHooks<T>,
) -> Result<Var> {
    let cfg = &params.config;
    let b = params.blocks[layer];
    let st = &params.store;
    let eps = T::from_f64(cfg.ln_eps);

    let g1 = s.bind(Owner::Backbone, b.ln1_g, st);
    let be1 = s.bind(Owner::Backbone, b.ln1_b, st);
    let h = s.tape.layer_norm(x, g1, be1, eps)?;

    let mut q = linear(s, h, b.w_q, b.b_q, params)?;
    if let Some(dq) = hooks.projection_delta(s, layer, LoraSite::Q, h)? {
        q = s.tape.add(q, dq)?;
    }
    let k = linear(s, h, b.w_k, b.b_k, params)?;
    let mut v = linear(s, h, b.w_v, b.b_v, params)?;
    if let Some(dv) = hooks.projection_delta(s, layer, LoraSite::V, h)? {
        v = s.tape.add(v, dv)?;
    }

    // Scores are scaled by 1/sqrt(d), the full model width.
    let inv = T::ONE / T::from_f64(cfg.dim as f64).sqrt();
    let hd = cfg.head_dim();
    let mut heads = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let cols = head * hd..(head + 1) * hd;
        let qh = s.tape.slice(q, 1, cols.clone())?;
        let kh = s.tape.slice(k, 1, cols.clone())?;
        let vh = s.tape.slice(v, 1, cols)?;
        let kt = s.tape.transpose(kh)?;
        let scores = s.tape.matmul(qh, kt)?;
        let scores = s.tape.scale(scores, inv);
        let attn = s.tape.softmax(scores, 1)?;
        heads.push(s.tape.matmul(attn, vh)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { s.tape.concat(&heads, 1)? };
    let msa = linear(s, cat, b.w_o, b.b_o, params)?;
    let x_hat = s.tape.add(msa, x)?;

    let g2 = s.bind(Owner::Backbone, b.ln2_g, st);
    let be2 = s.bind(Owner::Backbone, b.ln2_b, st);
    let h2 = s.tape.layer_norm(x_hat, g2, be2, eps)?;
    let f = linear(s, h2, b.w1, b.b1, params)?;
    let f = s.tape.relu(f);
    let f = linear(s, f, b.w2, b.b2, params)?;
    let f = hooks.ffn_output(s, layer, f)?;
    let out = s.tape.add(f, x_hat)?;
    match hooks.parallel_branch(s, layer, x_hat)? {
        Some(extra) => s.tape.add(out, extra),
        None => Ok(out),
    }
}

/// Full encoder on a session: returns the feature vector node.
pub fn encode<T: Float>(
    s: &mut Session<T>,
    image: &Tensor<T>,
    params: &BackboneParams<T>,
    hooks: &dyn BlockHooks<T>,
) -> Result<Var> {
    let cfg = &params.config;
    let st = &params.store;
    let eps = T::from_f64(cfg.ln_eps);
    let x = embed(s, image, params)?;
    let g = s.bind(Owner::Backbone, params.ln_pre.0, st);
    let b = s.bind(Owner::Backbone, params.ln_pre.1, st);
    let mut x = s.tape.layer_norm(x, g, b, eps)?;
    for layer in 0..cfg.layers {
        x = hooks.block_input(s, layer, x)?;
        x = block_forward(s, x, params, layer, hooks)?;
    }
    let c = s.tape.slice(x, 0, 0..1)?;
    let g = s.bind(Owner::Backbone, params.final_ln.0, st);
    let b = s.bind(Owner::Backbone, params.final_ln.1, st);
    let f = s.tape.layer_norm(c, g, b, eps)?;
    match params.feature_proj {
        Some(pi) => {
            let w = s.bind(Owner::Backbone, pi, st);
            let y = s.tape.matmul(f, w)?;
            s.tape.reshape(y, &[cfg.feature_dim()])
        }
        None => s.tape.reshape(f, &[cfg.dim]),
    }
}

/// Feature of one preprocessed `[3, S, S]` image.
pub fn extract_feature<T: Float>(
    image: &Tensor<T>,
    params: &BackboneParams<T>,
    hooks: &dyn BlockHooks<T>,
) -> Result<Tensor<T>> {
    let mut s = Session::inference();
    let f = encode(&mut s, image, params, hooks)?;
    Ok(s.value(f).clone())
}

/// Features of many images, in input order.
pub fn extract_features<T: Float>(
    images: &[Tensor<T>],
    params: &BackboneParams<T>,
    hooks: &dyn BlockHooks<T>,
) -> Result<Vec<Tensor<T>>> {
    parallel::try_map_indexed(images.len(), |i| extract_feature(&images[i], params, hooks))
}
