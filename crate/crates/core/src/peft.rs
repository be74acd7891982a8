//! Attachable parameter-efficient adaptation modules.
//!
//! Tensors owned by a module are named `peft.<variant>.<layer>.<name>`:
//!
//! ```text
//! vpt_shallow / vpt_deep   prompts        [p, d]
//! adapter / adaptformer    ln.g ln.b      [d]
//!                          w_down [d, r]  b_down [r]
//!                          w_up   [r, d]  b_up   [d]
//!                          s              [1]     (adaptformer only)
//! lora                     q.w_down [d, r]  q.w_up [r, d]  (and v.*)
//! ```
//!
//! `ln_tuning` and `bitfit` own no tensors; they unfreeze backbone tensors in place.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::session::{Owner, ParamStore, Session};
use crate::tensor::{Float, Tensor, Var};
use crate::vit::{backbone_param_shapes, BackboneParams, BlockHooks, LoraSite, ViTConfig};

/// Initial value of the AdaptFormer scale `s`.
pub const ADAPTFORMER_SCALE_INIT: f64 = 0.1;
const PROMPT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PeftVariant {
    #[default]
    None,
    LnTuning,
    Bitfit,
    VptShallow,
    VptDeep,
    Adapter,
    Lora,
    Adaptformer,
}

impl PeftVariant {
    pub const ALL: [PeftVariant; 8] = [
        PeftVariant::None,
        PeftVariant::LnTuning,
        PeftVariant::Bitfit,
        PeftVariant::VptShallow,
        PeftVariant::VptDeep,
        PeftVariant::Adapter,
        PeftVariant::Lora,
        PeftVariant::Adaptformer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PeftVariant::None => "none",
            PeftVariant::LnTuning => "ln_tuning",
            PeftVariant::Bitfit => "bitfit",
            PeftVariant::VptShallow => "vpt_shallow",
            PeftVariant::VptDeep => "vpt_deep",
            PeftVariant::Adapter => "adapter",
            PeftVariant::Lora => "lora",
            PeftVariant::Adaptformer => "adaptformer",
        }
    }

    pub fn uses_prompts(self) -> bool {
        matches!(self, PeftVariant::VptShallow | PeftVariant::VptDeep)
    }

    pub fn uses_bottleneck(self) -> bool {
        matches!(self, PeftVariant::Adapter | PeftVariant::Lora | PeftVariant::Adaptformer)
    }
}

impl std::fmt::Display for PeftVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which module to attach and its hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PeftConfig {
    #[serde(default)]
    pub variant: PeftVariant,
    /// Prompt count (VPT only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<usize>,
    /// Bottleneck width; defaults to [`default_bottleneck_dim`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
    /// LoRA projections; defaults to both Q and V.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora_targets: Option<Vec<LoraSite>>,
}

impl PeftConfig {
    pub fn new(variant: PeftVariant) -> Self {
        PeftConfig { variant, ..Default::default() }
    }

    pub fn with_r(mut self, r: usize) -> Self {
        self.r = Some(r);
        self
    }

    pub fn with_p(mut self, p: usize) -> Self {
        self.p = Some(p);
        self
    }

    pub fn with_targets(mut self, t: &[LoraSite]) -> Self {
        self.lora_targets = Some(t.to_vec());
        self
    }

    /// Checks that only the hyperparameters the variant uses are set, and that they are positive.
    pub fn validate(&self) -> Result<()> {
        let v = self.variant;
        if self.p.is_some() && !v.uses_prompts() {
            return Err(Error::Config(format!("prompt count p is not used by {v}")));
        }
        if self.r.is_some() && !v.uses_bottleneck() {
            return Err(Error::Config(format!("bottleneck dim r is not used by {v}")));
        }
        if self.lora_targets.is_some() && v != PeftVariant::Lora {
            return Err(Error::Config(format!("lora_targets is not used by {v}")));
        }
        if v.uses_prompts() {
            match self.p {
                Some(p) if p >= 1 => {}
                Some(_) => return Err(Error::Config("prompt count p must be at least 1".into())),
                None => return Err(Error::Config(format!("{v} requires a prompt count p"))),
            }
        }
        if self.r == Some(0) {
            return Err(Error::Config("bottleneck dim r must be at least 1".into()));
        }
        if let Some(t) = &self.lora_targets {
            if t.is_empty() {
                return Err(Error::Config("lora_targets must name Q, V or both".into()));
            }
            if t.len() == 2 && t[0] == t[1] || t.len() > 2 {
                return Err(Error::Config("lora_targets contains duplicates".into()));
            }
        }
        Ok(())
    }

    /// Validated copy with defaults filled in for `class_count` classes and `layers` blocks.
    pub fn resolve(&self, class_count: usize, layers: usize) -> Result<PeftConfig> {
        self.validate()?;
        let mut c = self.clone();
        if c.variant.uses_bottleneck() && c.r.is_none() {
            c.r = Some(default_bottleneck_dim(class_count, layers));
        }
        if c.variant == PeftVariant::Lora && c.lora_targets.is_none() {
            c.lora_targets = Some(vec![LoraSite::Q, LoraSite::V]);
        }
        Ok(c)
    }

    fn require_r(&self) -> Result<usize> {
        self.r
            .ok_or_else(|| Error::Config(format!("{} has no bottleneck dim; resolve the config first", self.variant)))
    }

    fn targets(&self) -> Vec<LoraSite> {
        let mut t = self.lora_targets.clone().unwrap_or_else(|| vec![LoraSite::Q, LoraSite::V]);
        t.sort_by_key(|s| matches!(s, LoraSite::V));
        t
    }
}

/// `max(1, 2^⌊log₂(K / 2L)⌋)`: the largest power of two not above `K/(2L)`.
pub fn default_bottleneck_dim(class_count: usize, layers: usize) -> usize {
    let q = class_count / (2 * layers.max(1));
    if q == 0 {
        1
    } else {
        1 << (usize::BITS - 1 - q.leading_zeros())
    }
}

/// How a module tensor is initialized and regularized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeftRole {
    /// Uniform in `±1/√fan_in`.
    Down { fan_in: usize },
    /// Zero, so the module starts as the identity.
    Up,
    Bias,
    Gain,
    Prompt,
    Scale,
}

impl PeftRole {
    fn decays(self) -> bool {
        matches!(self, PeftRole::Down { .. } | PeftRole::Up | PeftRole::Prompt)
    }
}

/// Every tensor a module owns, in attach order.
pub fn peft_param_layout(config: &PeftConfig, vit: &ViTConfig) -> Result<Vec<(String, Vec<usize>, PeftRole)>> {
    config.validate()?;
    let d = vit.dim;
    let v = config.variant;
    let mut out = Vec::new();
    let name = |l: usize, s: &str| format!("peft.{v}.{l}.{s}");
    match v {
        PeftVariant::None | PeftVariant::LnTuning | PeftVariant::Bitfit => {}
        PeftVariant::VptShallow | PeftVariant::VptDeep => {
            let p = config.p.expect("validated");
            let layers = if v == PeftVariant::VptShallow { 1 } else { vit.layers };
            for l in 0..layers {
                out.push((name(l, "prompts"), vec![p, d], PeftRole::Prompt));
            }
        }
        PeftVariant::Adapter | PeftVariant::Adaptformer => {
            let r = config.require_r()?;
            for l in 0..vit.layers {
                out.push((name(l, "ln.g"), vec![d], PeftRole::Gain));
                out.push((name(l, "ln.b"), vec![d], PeftRole::Bias));
                out.push((name(l, "w_down"), vec![d, r], PeftRole::Down { fan_in: d }));
                out.push((name(l, "b_down"), vec![r], PeftRole::Bias));
                out.push((name(l, "w_up"), vec![r, d], PeftRole::Up));
                out.push((name(l, "b_up"), vec![d], PeftRole::Bias));
                if v == PeftVariant::Adaptformer {
                    out.push((name(l, "s"), vec![1], PeftRole::Scale));
                }
            }
        }
        PeftVariant::Lora => {
            let r = config.require_r()?;
            for l in 0..vit.layers {
                for site in config.targets() {
                    let t = site_name(site);
                    out.push((name(l, &format!("{t}.w_down")), vec![d, r], PeftRole::Down { fan_in: d }));
                    out.push((name(l, &format!("{t}.w_up")), vec![r, d], PeftRole::Up));
                }
            }
        }
    }
    Ok(out)
}

fn site_name(site: LoraSite) -> &'static str {
    match site {
        LoraSite::Q => "q",
        LoraSite::V => "v",
    }
}

/// Backbone tensors a variant trains in place.
pub fn unfrozen_backbone_names(variant: PeftVariant, layers: usize) -> Vec<String> {
    let per_block: &[&str] = match variant {
        PeftVariant::LnTuning => &["ln1.g", "ln1.b", "ln2.g", "ln2.b"],
        PeftVariant::Bitfit => &["ln1.b", "msa.b_q", "msa.b_k", "msa.b_v", "msa.b_o", "ln2.b", "ffn.b1", "ffn.b2"],
        _ => &[],
    };
    (0..layers)
        .flat_map(|l| per_block.iter().map(move |s| format!("block.{l}.{s}")))
        .collect()
}

/// Trainable element count of a variant by enumerating its tensors
/// (owned tensors plus unfrozen backbone tensors).
pub fn count_peft_params(config: &PeftConfig, vit: &ViTConfig) -> Result<u64> {
    let owned: usize = peft_param_layout(config, vit)?
        .iter()
        .map(|(_, s, _)| s.iter().product::<usize>())
        .sum();
    let shapes: HashMap<String, Vec<usize>> = backbone_param_shapes(vit).into_iter().collect();
    let unfrozen: usize = unfrozen_backbone_names(config.variant, vit.layers)
        .iter()
        .map(|n| shapes[n].iter().product::<usize>())
        .sum();
    Ok((owned + unfrozen) as u64)
}

/// Per-block closed-form counts, summed over prompted or adapted layers.
pub fn closed_form_peft_params(config: &PeftConfig, vit: &ViTConfig) -> Result<u64> {
    config.validate()?;
    let (d, l) = (vit.dim as u64, vit.layers as u64);
    Ok(match config.variant {
        PeftVariant::None => 0,
        PeftVariant::LnTuning => 4 * d * l,
        PeftVariant::Bitfit => 11 * d * l,
        PeftVariant::VptShallow => config.p.expect("validated") as u64 * d,
        PeftVariant::VptDeep => config.p.expect("validated") as u64 * d * l,
        PeftVariant::Adapter => {
            let r = config.require_r()? as u64;
            ((2 * r + 3) * d + r) * l
        }
        PeftVariant::Adaptformer => {
            let r = config.require_r()? as u64;
            ((2 * r + 3) * d + r + 1) * l
        }
        PeftVariant::Lora => {
            let r = config.require_r()? as u64;
            2 * r * d * config.targets().len() as u64 * l
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct AdapterSlots {
    ln_g: usize,
    ln_b: usize,
    w_down: usize,
    b_down: usize,
    w_up: usize,
    b_up: usize,
    scale: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LayerSlots {
    Empty,
    Prompt(usize),
    Adapter(AdapterSlots),
    Lora { q: Option<(usize, usize)>, v: Option<(usize, usize)> },
}

/// An attached module: its tensors and the forward hooks they drive.
#[derive(Debug, Clone, PartialEq)]
pub struct PeftState<T> {
    pub config: PeftConfig,
    pub store: ParamStore<T>,
    /// Backbone tensors unfrozen by this module.
    pub unfrozen: Vec<String>,
    layers: Vec<LayerSlots>,
    ln_eps: f64,
}

impl<T: Float> PeftState<T> {
    /// Attaches a resolved `config` to `backbone`, creating freshly initialized tensors.
    pub fn attach(config: &PeftConfig, backbone: &mut BackboneParams<T>, rng: &mut RngStream) -> Result<Self> {
        Self::build(config, backbone, |_, shape, role| {
            Ok(match role {
                PeftRole::Down { fan_in } => rng.uniform_tensor(shape, 1.0 / (fan_in as f64).sqrt()),
                PeftRole::Up | PeftRole::Bias => Tensor::zeros(shape.to_vec()),
                PeftRole::Gain => Tensor::full(shape.to_vec(), T::ONE),
                PeftRole::Prompt => rng.normal_tensor(shape, PROMPT_STD),
                PeftRole::Scale => Tensor::full(shape.to_vec(), T::from_f64(ADAPTFORMER_SCALE_INIT)),
            })
        })
    }

    /// Re-attaches a module whose tensors were saved into `archive`.
    pub fn from_archive(config: &PeftConfig, backbone: &mut BackboneParams<T>, archive: &Archive) -> Result<Self> {
        Self::build(config, backbone, |name, _, _| archive.require_float(name))
    }

    fn build(
        config: &PeftConfig,
        backbone: &mut BackboneParams<T>,
        mut make: impl FnMut(&str, &[usize], PeftRole) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        let vit = backbone.config.clone();
        let layout = peft_param_layout(config, &vit)?;
        let mut store = ParamStore::new();
        for (name, shape, role) in layout {
            let t = make(&name, &shape, role)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "entry \"{name}\" has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            store.push(name, t, true, role.decays());
        }
        let unfrozen = unfrozen_backbone_names(config.variant, vit.layers);
        for n in &unfrozen {
            backbone.store.set_trainable(n, true)?;
        }
        let v = config.variant;
        let find = |l: usize, s: &str| store.find(&format!("peft.{v}.{l}.{s}"));
        let layers = (0..vit.layers)
            .map(|l| match v {
                PeftVariant::VptShallow | PeftVariant::VptDeep => {
                    find(l, "prompts").map_or(LayerSlots::Empty, LayerSlots::Prompt)
                }
                PeftVariant::Adapter | PeftVariant::Adaptformer => LayerSlots::Adapter(AdapterSlots {
                    ln_g: find(l, "ln.g").expect("layout"),
                    ln_b: find(l, "ln.b").expect("layout"),
                    w_down: find(l, "w_down").expect("layout"),
                    b_down: find(l, "b_down").expect("layout"),
                    w_up: find(l, "w_up").expect("layout"),
                    b_up: find(l, "b_up").expect("layout"),
                    scale: find(l, "s"),
                }),
                PeftVariant::Lora => {
                    let pair = |t: &str| Some((find(l, &format!("{t}.w_down"))?, find(l, &format!("{t}.w_up"))?));
                    LayerSlots::Lora { q: pair("q"), v: pair("v") }
                }
                _ => LayerSlots::Empty,
            })
            .collect();
        Ok(PeftState { config: config.clone(), store, unfrozen, layers, ln_eps: vit.ln_eps })
    }

    pub fn variant(&self) -> PeftVariant {
        self.config.variant
    }

    /// Writes every owned tensor (as float32) into `archive`.
    pub fn write_into(&self, archive: &mut Archive) {
        for p in self.store.iter() {
            archive.insert_float::<f32>(p.name.clone(), &p.value.cast());
        }
    }

    /// Current AdaptFormer scales in layer order.
    pub fn learned_scales(&self) -> Result<Vec<f64>> {
        if self.variant() != PeftVariant::Adaptformer {
            return Err(Error::Contract(format!("{} has no learned scales", self.variant())));
        }
        Ok(self
            .layers
            .iter()
            .filter_map(|s| match s {
                LayerSlots::Adapter(a) => a.scale.map(|i| self.store.get(i).value.data()[0].to_f64()),
                _ => None,
            })
            .collect())
    }

    pub fn cast<U: Float>(&self) -> PeftState<U> {
        let mut store = ParamStore::new();
        for p in self.store.iter() {
            store.push(p.name.clone(), p.value.cast(), p.trainable, p.decay);
        }
        PeftState {
            config: self.config.clone(),
            store,
            unfrozen: self.unfrozen.clone(),
            layers: self.layers.clone(),
            ln_eps: self.ln_eps,
        }
    }

    fn adapter(&self, s: &mut Session<T>, a: &AdapterSlots, x: Var) -> Result<Var> {
        let st = &self.store;
        let g = s.bind(Owner::Peft, a.ln_g, st);
        let b = s.bind(Owner::Peft, a.ln_b, st);
        let h = s.tape.layer_norm(x, g, b, T::from_f64(self.ln_eps))?;
        let wd = s.bind(Owner::Peft, a.w_down, st);
        let bd = s.bind(Owner::Peft, a.b_down, st);
        let h = s.tape.matmul(h, wd)?;
        let h = s.tape.add(h, bd)?;
        let h = s.tape.relu(h);
        let wu = s.bind(Owner::Peft, a.w_up, st);
        let bu = s.bind(Owner::Peft, a.b_up, st);
        let h = s.tape.matmul(h, wu)?;
        s.tape.add(h, bu)
    }
}

impl<T: Float> BlockHooks<T> for PeftState<T> {
    fn block_input(&self, s: &mut Session<T>, layer: usize, x: Var) -> Result<Var> {
        let LayerSlots::Prompt(pi) = self.layers[layer] else {
            return Ok(x);
        };
        let p = self.store.get(pi).value.shape()[0];
        let prompts = s.bind(Owner::Peft, pi, &self.store);
        let n = s.tape.shape(x)[0];
        let cls = s.tape.slice(x, 0, 0..1)?;
        // Layer 0 sees [cls; E]; deeper layers see [cls; P; E] and get fresh prompts.
        let rest_from = if layer == 0 { 1 } else { 1 + p };
        let rest = s.tape.slice(x, 0, rest_from..n)?;
        s.tape.concat(&[cls, prompts, rest], 0)
    }

    fn projection_delta(&self, s: &mut Session<T>, layer: usize, site: LoraSite, h: Var) -> Result<Option<Var>> {
        let LayerSlots::Lora { q, v } = self.layers[layer] else {
            return Ok(None);
        };
        let Some((down, up)) = (match site {
            LoraSite::Q => q,
            LoraSite::V => v,
        }) else {
            return Ok(None);
        };
        let wd = s.bind(Owner::Peft, down, &self.store);
        let wu = s.bind(Owner::Peft, up, &self.store);
        let t = s.tape.matmul(h, wd)?;
        Ok(Some(s.tape.matmul(t, wu)?))
    }

    fn ffn_output(&self, s: &mut Session<T>, layer: usize, f: Var) -> Result<Var> {
        match self.layers[layer] {
            LayerSlots::Adapter(a) if a.scale.is_none() => {
                let delta = self.adapter(s, &a, f)?;
                s.tape.add(f, delta)
            }
            _ => Ok(f),
        }
    }

    fn parallel_branch(&self, s: &mut Session<T>, layer: usize, x_hat: Var) -> Result<Option<Var>> {
        match self.layers[layer] {
            LayerSlots::Adapter(a) => match a.scale {
                Some(si) => {
                    let y = self.adapter(s, &a, x_hat)?;
                    let sv = s.bind(Owner::Peft, si, &self.store);
                    Ok(Some(s.tape.mul_scalar(y, sv)?))
                }
                None => Ok(None),
            },
            _ => Ok(None),
        }
    }
}
