use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::HeadKind;
use crate::error::{Error, Result};
use crate::peft::{closed_form_peft_params, count_peft_params, PeftConfig, PeftVariant};
use crate::vit::{backbone_param_shapes, closed_form_backbone_params, count_backbone_params, ViTConfig};

/// Benchmark settings with ViT-B/16 and AdaptFormer at the default bottleneck width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    ImagenetLt,
    PlacesLt,
    Inat18,
    Cifar100Lt,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::ImagenetLt, Preset::PlacesLt, Preset::Inat18, Preset::Cifar100Lt];

    pub fn name(self) -> &'static str {
        match self {
            Preset::ImagenetLt => "imagenet-lt",
            Preset::PlacesLt => "places-lt",
            Preset::Inat18 => "inat18",
            Preset::Cifar100Lt => "cifar100-lt",
        }
    }

    pub fn classes(self) -> usize {
        match self {
            Preset::ImagenetLt => 1000,
            Preset::PlacesLt => 365,
            Preset::Inat18 => 8142,
            Preset::Cifar100Lt => 100,
        }
    }

    pub fn spec(self) -> AuditSpec {
        AuditSpec {
            name: Some(self.name().into()),
            vit: ViTConfig::vit_b16(),
            classes: self.classes(),
            peft: PeftConfig::new(PeftVariant::Adaptformer),
            head_kind: HeadKind::Cosine,
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}; expected one of imagenet-lt, places-lt, inat18, cifar100-lt")))
    }
}

fn default_vit() -> ViTConfig {
    ViTConfig::vit_b16()
}

/// An explicit audit target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default = "default_vit")]
    pub vit: ViTConfig,
    pub classes: usize,
    #[serde(default)]
    pub peft: PeftConfig,
    #[serde(default)]
    pub head_kind: HeadKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub name: Option<String>,
    pub classes: usize,
    pub layers: usize,
    pub dim: usize,
    pub patches: usize,
    pub peft: PeftConfig,
    pub peft_closed_form: u64,
    pub peft_enumerated: u64,
    pub classifier: u64,
    pub backbone_closed_form: u64,
    pub backbone_enumerated: u64,
    /// Whether closed forms and enumerations agree.
    pub agree: bool,
}

impl AuditReport {
    /// Millions with two decimals, as quoted in results tables.
    pub fn peft_millions(&self) -> String {
        format!("{:.2}M", self.peft_closed_form as f64 / 1e6)
    }
}

pub fn audit_config(spec: &AuditSpec) -> Result<AuditReport> {
    spec.vit.validate()?;
    if spec.classes == 0 {
        return Err(Error::Config("classes must be positive".into()));
    }
    let peft = spec.peft.resolve(spec.classes, spec.vit.layers)?;
    let peft_closed_form = closed_form_peft_params(&peft, &spec.vit)?;
    let peft_enumerated = count_peft_params(&peft, &spec.vit)?;
    let fd = spec.vit.feature_dim() as u64;
    let k = spec.classes as u64;
    let classifier = k * fd + if spec.head_kind == HeadKind::Linear { k } else { 0 };
    let v = &spec.vit;
    let backbone_closed_form = if v.patch_dim() == v.dim {
        closed_form_backbone_params(v.layers as u64, v.dim as u64, v.patches() as u64)
    } else {
        count_backbone_params(v)
    };
    let backbone_enumerated = backbone_param_shapes(v)
        .iter()
        .filter(|(n, _)| n != "feature_proj.w")
        .map(|(_, s)| s.iter().product::<usize>() as u64)
        .sum();
    Ok(AuditReport {
        name: spec.name.clone(),
        classes: spec.classes,
        layers: v.layers,
        dim: v.dim,
        patches: v.patches(),
        peft,
        peft_closed_form,
        peft_enumerated,
        classifier,
        backbone_closed_form,
        backbone_enumerated,
        agree: peft_closed_form == peft_enumerated && backbone_closed_form == backbone_enumerated,
    })
}

pub fn audit_preset(p: Preset) -> Result<AuditReport> {
    audit_config(&p.spec())
}
