//! The vision-transformer image encoder.
//!
//! Parameters use a canonical naming scheme shared by archives, checkpoints
//! and the parameter census:
//!
//! ```text
//! embed.patch_proj.w   [patch_dim, d]     patch_dim = 3·patch²
//! embed.cls            [d]
//! embed.pos            [m+1, d]
//! embed.ln_pre.{g,b}   [d]
//! block.<l>.ln1.{g,b}  [d]
//! block.<l>.msa.{w_q,w_k,w_v,w_o} [d, d]   (Q/K/V fused, split per head at use)
//! block.<l>.msa.{b_q,b_k,b_v,b_o} [d]
//! block.<l>.ln2.{g,b}  [d]
//! block.<l>.ffn.w1 [d, 4d]  ffn.b1 [4d]  ffn.w2 [4d, d]  ffn.b2 [d]
//! final_ln.{g,b}       [d]
//! feature_proj.w       [d, projection_dim]   (optional)
//! ```

mod forward;

pub use forward::{
    block_forward, embed, encode, extract_feature, extract_features, patchify, BlockHooks, LoraSite, NoHooks,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::session::{Owner, ParamStore};
use crate::tensor::{Float, Tensor};

const META_CONFIG: &str = "meta.vit_config_json";

fn default_eps() -> f64 {
    1e-5
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Number of transformer blocks.
    pub layers: usize,
    /// Embedding width.
    pub dim: usize,
    pub heads: usize,
    /// Output width of the optional feature projection.
    #[serde(default)]
    pub projection_dim: Option<usize>,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
}

impl ViTConfig {
    /// ViT-B/16 at 224² input.
    pub fn vit_b16() -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            layers: 12,
            dim: 768,
            heads: 12,
            projection_dim: None,
            ln_eps: 1e-5,
        }
    }

    pub fn tiny(image_size: usize, patch_size: usize, layers: usize, dim: usize, heads: usize) -> Self {
        ViTConfig { image_size, patch_size, layers, dim, heads, projection_dim: None, ln_eps: 1e-5 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.layers == 0 || self.dim == 0 || self.heads == 0 {
            return bad(format!("ViT config has a zero extent: {self:?}"));
        }
        if self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.projection_dim == Some(0) {
            return bad("projection_dim must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }

    /// Patches per image.
    pub fn patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn seq_len(&self) -> usize {
        self.patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn has_feature_projection(&self) -> bool {
        self.projection_dim.is_some()
    }

    /// Width of the extracted feature.
    pub fn feature_dim(&self) -> usize {
        self.projection_dim.unwrap_or(self.dim)
    }
}

/// How a tensor is initialized by [`BackboneParams::init_random`], and whether it decays.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Role {
    Matrix { fan_in: usize },
    Bias,
    Gain,
    Embedding,
}

/// Every backbone tensor name with its shape, in canonical order.
pub fn backbone_param_shapes(cfg: &ViTConfig) -> Vec<(String, Vec<usize>)> {
    backbone_layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

fn backbone_layout(cfg: &ViTConfig) -> Vec<(String, Vec<usize>, Role)> {
    let d = cfg.dim;
    let mut v = vec![
        ("embed.patch_proj.w".to_string(), vec![cfg.patch_dim(), d], Role::Matrix { fan_in: cfg.patch_dim() }),
        ("embed.cls".to_string(), vec![d], Role::Embedding),
        ("embed.pos".to_string(), vec![cfg.seq_len(), d], Role::Embedding),
        ("embed.ln_pre.g".to_string(), vec![d], Role::Gain),
        ("embed.ln_pre.b".to_string(), vec![d], Role::Bias),
    ];
    for l in 0..cfg.layers {
        let p = |s: &str| format!("block.{l}.{s}");
        v.push((p("ln1.g"), vec![d], Role::Gain));
        v.push((p("ln1.b"), vec![d], Role::Bias));
        for w in ["q", "k", "v"] {
            v.push((p(&format!("msa.w_{w}")), vec![d, d], Role::Matrix { fan_in: d }));
        }
        for b in ["q", "k", "v"] {
            v.push((p(&format!("msa.b_{b}")), vec![d], Role::Bias));
        }
        v.push((p("msa.w_o"), vec![d, d], Role::Matrix { fan_in: d }));
        v.push((p("msa.b_o"), vec![d], Role::Bias));
        v.push((p("ln2.g"), vec![d], Role::Gain));
        v.push((p("ln2.b"), vec![d], Role::Bias));
        v.push((p("ffn.w1"), vec![d, 4 * d], Role::Matrix { fan_in: d }));
        v.push((p("ffn.b1"), vec![4 * d], Role::Bias));
        v.push((p("ffn.w2"), vec![4 * d, d], Role::Matrix { fan_in: 4 * d }));
        v.push((p("ffn.b2"), vec![d], Role::Bias));
    }
    v.push(("final_ln.g".to_string(), vec![d], Role::Gain));
    v.push(("final_ln.b".to_string(), vec![d], Role::Bias));
    if let Some(pd) = cfg.projection_dim {
        v.push(("feature_proj.w".to_string(), vec![d, pd], Role::Matrix { fan_in: d }));
    }
    v
}

/// Closed-form parameter count of the backbone without feature projection:
/// `(12L+1)d² + (13L+m+6)d`, which assumes the patch projection is d×d.
pub fn closed_form_backbone_params(layers: u64, dim: u64, patches: u64) -> u64 {
    (12 * layers + 1) * dim * dim + (13 * layers + patches + 6) * dim
}

/// Backbone parameter count for `cfg` (feature projection excluded).
///
/// Equals [`closed_form_backbone_params`] when the patch width `3·patch²`
/// equals `d`; otherwise the projection term is `patch_dim·d`.
pub fn count_backbone_params(cfg: &ViTConfig) -> u64 {
    let (l, d, m) = (cfg.layers as u64, cfg.dim as u64, cfg.patches() as u64);
    closed_form_backbone_params(l, d, m) - d * d + cfg.patch_dim() as u64 * d
}

/// Indices of one block's tensors in the backbone store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSlots {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_q: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub b_q: usize,
    pub b_k: usize,
    pub b_v: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Trainability of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackboneMode {
    #[default]
    Frozen,
    Full,
    /// Last `k` blocks plus the final layer norm.
    Partial(usize),
}

/// Weights of the encoder plus typed indices into them.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams<T> {
    pub config: ViTConfig,
    pub store: ParamStore<T>,
    pub(crate) patch_proj: usize,
    pub(crate) cls: usize,
    pub(crate) pos: usize,
    pub(crate) ln_pre: (usize, usize),
    pub(crate) blocks: Vec<BlockSlots>,
    pub(crate) final_ln: (usize, usize),
    pub(crate) feature_proj: Option<usize>,
}

impl<T: Float> BackboneParams<T> {
    /// Builds from a name → tensor lookup; every canonical tensor must be present with its exact shape.
    fn assemble(config: &ViTConfig, mut lookup: impl FnMut(&str, &[usize]) -> Result<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        for (name, shape, role) in backbone_layout(config) {
            let t = lookup(&name, &shape)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "entry \"{name}\" has shape {:?}, config expects {:?}",
                    t.shape(),
                    shape
                )));
            }
            let decay = matches!(role, Role::Matrix { .. } | Role::Embedding);
            store.push(name, t, false, decay);
        }
        let ix = |n: &str| store.find(n).expect("layout name");
        let blocks = (0..config.layers)
            .map(|l| {
                let b = |s: &str| ix(&format!("block.{l}.{s}"));
                BlockSlots {
                    ln1_g: b("ln1.g"),
                    ln1_b: b("ln1.b"),
                    w_q: b("msa.w_q"),
                    w_k: b("msa.w_k"),
                    w_v: b("msa.w_v"),
                    b_q: b("msa.b_q"),
                    b_k: b("msa.b_k"),
                    b_v: b("msa.b_v"),
                    w_o: b("msa.w_o"),
                    b_o: b("msa.b_o"),
                    ln2_g: b("ln2.g"),
                    ln2_b: b("ln2.b"),
                    w1: b("ffn.w1"),
                    b1: b("ffn.b1"),
                    w2: b("ffn.w2"),
                    b2: b("ffn.b2"),
                }
            })
            .collect();
        Ok(BackboneParams {
            config: config.clone(),
            patch_proj: ix("embed.patch_proj.w"),
            cls: ix("embed.cls"),
            pos: ix("embed.pos"),
            ln_pre: (ix("embed.ln_pre.g"), ix("embed.ln_pre.b")),
            blocks,
            final_ln: (ix("final_ln.g"), ix("final_ln.b")),
            feature_proj: config.projection_dim.map(|_| ix("feature_proj.w")),
            store,
        })
    }

    /// Random weights: matrices N(0, 1/fan_in), embeddings N(0, 0.02²), gains 1, biases 0.
    pub fn init_random(config: &ViTConfig, rng: &mut RngStream) -> Result<Self> {
        let roles: std::collections::HashMap<String, Role> =
            backbone_layout(config).into_iter().map(|(n, _, r)| (n, r)).collect();
        Self::assemble(config, |name, shape| {
            Ok(match roles[name] {
                Role::Matrix { fan_in } => rng.normal_tensor(shape, 1.0 / (fan_in as f64).sqrt()),
                Role::Embedding => rng.normal_tensor(shape, 0.02),
                Role::Gain => Tensor::full(shape.to_vec(), T::ONE),
                Role::Bias => Tensor::zeros(shape.to_vec()),
            })
        })
    }

    /// Every tensor set to `value` (used for degenerate-case checks).
    pub fn filled(config: &ViTConfig, value: T) -> Result<Self> {
        Self::assemble(config, |_, shape| Ok(Tensor::full(shape.to_vec(), value)))
    }

    /// Loads canonical entries from `archive`.
    ///
    /// Returns the parameters and a list of warnings for entries that were
    /// not recognized. The config comes from `config` or, failing that, from
    /// the archive's embedded `meta.vit_config_json`.
    pub fn from_archive(archive: &Archive, config: Option<&ViTConfig>) -> Result<(Self, Vec<String>)> {
        let embedded = match archive.get(META_CONFIG) {
            Some(_) => Some(serde_json::from_str::<ViTConfig>(&archive.require_string(META_CONFIG)?)?),
            None => None,
        };
        let config = match (config, embedded) {
            (Some(c), Some(e)) if *c != e => {
                return Err(Error::Config(format!(
                    "backbone archive was written for {e:?}, but {c:?} was requested"
                )))
            }
            (Some(c), _) => c.clone(),
            (None, Some(e)) => e,
            (None, None) => {
                return Err(Error::Config("backbone archive carries no ViT config and none was given".into()))
            }
        };
        let params = Self::assemble(&config, |name, _| archive.require_float(name))?;
        let warnings = archive
            .names()
            .filter(|n| params.store.find(n).is_none() && *n != META_CONFIG && !n.starts_with("peft.") && !n.starts_with("head.") && !n.starts_with("meta."))
            .map(|n| format!("ignoring unknown entry \"{n}\""))
            .collect();
        Ok((params, warnings))
    }

    pub fn load_archive(path: impl AsRef<Path>, config: Option<&ViTConfig>) -> Result<(Self, Vec<String>)> {
        Self::from_archive(&Archive::load(path)?, config)
    }

    /// Writes every tensor (as float32) plus the config into `archive`.
    pub fn write_into(&self, archive: &mut Archive) -> Result<()> {
        archive.insert_bytes(META_CONFIG, serde_json::to_string(&self.config)?.as_bytes());
        for p in self.store.iter() {
            archive.insert_float::<f32>(p.name.clone(), &p.value.cast());
        }
        Ok(())
    }

    pub fn save_archive(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut a = Archive::new();
        self.write_into(&mut a)?;
        a.save(path)
    }

    pub fn cast<U: Float>(&self) -> BackboneParams<U> {
        let mut store = ParamStore::new();
        for p in self.store.iter() {
            store.push(p.name.clone(), p.value.cast(), p.trainable, p.decay);
        }
        BackboneParams {
            config: self.config.clone(),
            store,
            patch_proj: self.patch_proj,
            cls: self.cls,
            pos: self.pos,
            ln_pre: self.ln_pre,
            blocks: self.blocks.clone(),
            final_ln: self.final_ln,
            feature_proj: self.feature_proj,
        }
    }

    /// Appends a `[d, projection_dim]` feature projection.
    pub fn with_feature_projection(mut self, w: Tensor<T>) -> Result<Self> {
        if self.feature_proj.is_some() {
            return Err(Error::Contract("backbone already has a feature projection".into()));
        }
        if w.rank() != 2 || w.shape()[0] != self.config.dim {
            return Err(crate::error::dim_err!(
                "feature projection {:?} does not start at width {}",
                w.shape(),
                self.config.dim
            ));
        }
        self.config.projection_dim = Some(w.shape()[1]);
        self.feature_proj = Some(self.store.push("feature_proj.w", w, false, true));
        Ok(self)
    }

    pub fn set_trainable(&mut self, mode: BackboneMode) -> Result<()> {
        let layers = self.config.layers;
        match mode {
            BackboneMode::Frozen => self.store.set_all_trainable(false),
            BackboneMode::Full => self.store.set_all_trainable(true),
            BackboneMode::Partial(k) => {
                if k > layers {
                    return Err(Error::Contract(format!("partial({k}) exceeds {layers} blocks")));
                }
                self.store.set_all_trainable(false);
                if k > 0 {
                    for l in layers - k..layers {
                        let prefix = format!("block.{l}.");
                        for p in self.store.iter_mut().filter(|p| p.name.starts_with(&prefix)) {
                            p.trainable = true;
                        }
                    }
                    self.store.set_trainable("final_ln.g", true)?;
                    self.store.set_trainable("final_ln.b", true)?;
                }
            }
        }
        Ok(())
    }

    /// Names of trainable tensors.
    pub fn trainable_names(&self) -> Vec<String> {
        self.store.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect()
    }

    pub fn owner() -> Owner {
        Owner::Backbone
    }
}
