//! Classification heads over backbone features.
//!
//! Weights are stored as `head.w` `[K, F]` and `head.b` `[K]`. The bias only
//! participates in the linear kind.

use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{dim_err, Error, Result};
use crate::rng::RngStream;
use crate::session::{Owner, ParamStore, Session};
use crate::tensor::{Float, Tensor, Var};

pub const DEFAULT_SCALE: f64 = 25.0;
const RANDOM_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    /// `z_k = w_kᵀ f / ‖w_k‖`.
    L2Normalized,
    /// `z_k = σ · cos(w_k, f)`.
    #[default]
    Cosine,
}

/// How the head weights are initialized before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    #[default]
    Random,
    /// Rows copied from a text-feature archive.
    Semantic,
    ClassMean,
    LinearProbe,
}

fn default_scale() -> f64 {
    DEFAULT_SCALE
}

fn default_probe_epochs() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    #[serde(default)]
    pub kind: HeadKind,
    /// σ for the cosine kind.
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default)]
    pub init: InitStrategy,
    /// Text-feature archive for semantic init, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_features: Option<String>,
    #[serde(default = "default_probe_epochs")]
    pub probe_epochs: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            kind: HeadKind::default(),
            scale: DEFAULT_SCALE,
            init: InitStrategy::default(),
            text_features: None,
            probe_epochs: default_probe_epochs(),
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("classifier scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams<T> {
    pub kind: HeadKind,
    pub scale: f64,
    pub store: ParamStore<T>,
    w: usize,
    b: usize,
}

impl<T: Float> ClassifierParams<T> {
    /// Head with the given weight rows and zero bias.
    pub fn from_weights(kind: HeadKind, scale: f64, w: Tensor<T>) -> Result<Self> {
        if w.rank() != 2 {
            return Err(dim_err!("classifier weights must be [K, F], got {:?}", w.shape()));
        }
        let k = w.shape()[0];
        Self::from_parts(kind, scale, w, Tensor::zeros(vec![k]))
    }

    pub fn from_parts(kind: HeadKind, scale: f64, w: Tensor<T>, b: Tensor<T>) -> Result<Self> {
        if w.rank() != 2 || b.shape() != [w.shape()[0]] {
            return Err(dim_err!("classifier weights {:?} and bias {:?} disagree", w.shape(), b.shape()));
        }
        let mut store = ParamStore::new();
        let wi = store.push("head.w", w, true, true);
        let bi = store.push("head.b", b, kind == HeadKind::Linear, false);
        Ok(ClassifierParams { kind, scale, store, w: wi, b: bi })
    }

    /// Rows drawn from N(0, 0.02²).
    pub fn init_random(kind: HeadKind, scale: f64, classes: usize, feature_dim: usize, rng: &mut RngStream) -> Self {
        Self::from_weights(kind, scale, rng.normal_tensor(&[classes, feature_dim], RANDOM_STD)).expect("rank 2")
    }

    /// Rows copied verbatim from `text_emb.<k>` entries of a text-feature archive.
    pub fn init_semantic(kind: HeadKind, scale: f64, text: &Archive, classes: usize, feature_dim: usize) -> Result<Self> {
        if let Some(n) = text.get("meta.class_count") {
            let n = match n {
                crate::tensor::AnyTensor::I64(t) if t.numel() == 1 => t.data()[0],
                _ => return Err(Error::Format("meta.class_count is not an int64 scalar".into())),
            };
            if n != classes as i64 {
                return Err(Error::Config(format!("text features cover {n} classes, dataset has {classes}")));
            }
        }
        let mut rows = Vec::with_capacity(classes * feature_dim);
        for k in 0..classes {
            let name = format!("text_emb.{k}");
            let e = text
                .get(&name)
                .ok_or_else(|| Error::Format(format!("text features are missing class {k} (entry \"{name}\")")))?
                .to_float::<T>()?;
            if e.numel() != feature_dim {
                return Err(dim_err!(
                    "text feature for class {k} has {} values, backbone features have {feature_dim}",
                    e.numel()
                ));
            }
            rows.extend_from_slice(e.data());
        }
        Self::from_weights(kind, scale, Tensor::new(vec![classes, feature_dim], rows)?)
    }

    /// `w_k` = mean feature of class `k`.
    pub fn init_class_mean(
        kind: HeadKind,
        scale: f64,
        features: &[Tensor<T>],
        labels: &[usize],
        classes: usize,
    ) -> Result<Self> {
        let w = class_means(features, labels, classes)?;
        Self::from_weights(kind, scale, w)
    }

    pub fn classes(&self) -> usize {
        self.weights().shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.weights().shape()[1]
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.store.get(self.w).value
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.store.get(self.b).value
    }

    /// Logits node for a feature node of shape `[F]`.
    pub fn logits(&self, s: &mut Session<T>, f: Var) -> Result<Var> {
        let (k, fd) = (self.classes(), self.feature_dim());
        if s.tape.shape(f) != [fd] {
            return Err(dim_err!("feature has shape {:?}, classifier expects [{fd}]", s.tape.shape(f)));
        }
        let mut w = s.bind(Owner::Head, self.w, &self.store);
        let mut f = f;
        if self.kind != HeadKind::Linear {
            let n = s.tape.l2_norm(w, 1)?;
            if let Some(row) = s.value(n).data().iter().position(|&v| !(v > T::ZERO)) {
                return Err(Error::NumericGuard(format!("classifier row {row} has zero norm")));
            }
            w = s.tape.div_along(w, n, 1)?;
        }
        if self.kind == HeadKind::Cosine {
            let n = s.tape.l2_norm(f, 0)?;
            if !(s.value(n).data()[0] > T::ZERO) {
                return Err(Error::NumericGuard("feature has zero norm".into()));
            }
            f = s.tape.div_along(f, n, 0)?;
        }
        let col = s.tape.reshape(f, &[fd, 1])?;
        let z = s.tape.matmul(w, col)?;
        let z = s.tape.reshape(z, &[k])?;
        Ok(match self.kind {
            HeadKind::Linear => {
                let b = s.bind(Owner::Head, self.b, &self.store);
                s.tape.add(z, b)?
            }
            HeadKind::L2Normalized => z,
            HeadKind::Cosine => s.tape.scale(z, T::from_f64(self.scale)),
        })
    }

    /// Logits of a concrete feature vector.
    pub fn logits_eager(&self, f: &Tensor<T>) -> Result<Tensor<T>> {
        let mut s = Session::inference();
        let fv = s.tape.constant(f.clone());
        let z = self.logits(&mut s, fv)?;
        Ok(s.value(z).clone())
    }

    /// `‖w_k‖₂` per class.
    pub fn weight_norms(&self) -> Tensor<T> {
        self.weights().l2_norm(1).expect("rank 2")
    }

    pub fn write_into(&self, archive: &mut Archive) {
        archive.insert_float::<f32>("head.w", &self.weights().cast());
        archive.insert_float::<f32>("head.b", &self.bias().cast());
    }

    pub fn from_archive(kind: HeadKind, scale: f64, archive: &Archive) -> Result<Self> {
        Self::from_parts(kind, scale, archive.require_float("head.w")?, archive.require_float("head.b")?)
    }

    pub fn cast<U: Float>(&self) -> ClassifierParams<U> {
        ClassifierParams::from_parts(self.kind, self.scale, self.weights().cast(), self.bias().cast()).expect("shapes")
    }
}

/// Per-class mean of feature vectors; every class needs at least one sample.
pub fn class_means<T: Float>(features: &[Tensor<T>], labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    if features.len() != labels.len() {
        return Err(Error::Contract(format!("{} features for {} labels", features.len(), labels.len())));
    }
    let fd = features.first().map_or(0, |f| f.numel());
    let mut sums = vec![T::ZERO; classes * fd];
    let mut counts = vec![0usize; classes];
    for (f, &y) in features.iter().zip(labels) {
        if y >= classes {
            return Err(Error::Contract(format!("label {y} outside {classes} classes")));
        }
        if f.numel() != fd {
            return Err(dim_err!("features of unequal width {} and {fd}", f.numel()));
        }
        counts[y] += 1;
        for (acc, &v) in sums[y * fd..(y + 1) * fd].iter_mut().zip(f.data()) {
            *acc += v;
        }
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Contract(format!("class {k} has no samples")));
    }
    for (k, &c) in counts.iter().enumerate() {
        let inv = T::from_f64(c as f64);
        for v in &mut sums[k * fd..(k + 1) * fd] {
            *v = *v / inv;
        }
    }
    Tensor::new(vec![classes, fd], sums)
}
