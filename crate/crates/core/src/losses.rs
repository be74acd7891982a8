//! Class priors, the logit-adjusted and cross-entropy losses, and zero-shot prediction.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Empirical class frequencies of a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    pub counts: Vec<usize>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl ClassPrior {
    pub fn from_counts(counts: Vec<usize>) -> Result<Self> {
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Contract(format!("class {k} has no training samples")));
        }
        let n: usize = counts.iter().sum();
        let probs: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Ok(ClassPrior { counts, probs, log_probs })
    }

    pub fn uniform(classes: usize) -> Self {
        Self::from_counts(vec![1; classes]).expect("nonzero counts")
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    /// `log π_k − max_j log π_j`.
    ///
    /// Softmax is shift invariant, so this gives the same loss as `log π`
    /// while making a uniform prior contribute exact zeros.
    pub fn adjustment(&self) -> Vec<f64> {
        let mx = self.log_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.log_probs.iter().map(|&l| l - mx).collect()
    }
}

/// Prior from labels in `[0, classes)`. With `smoothing`, every count gets +1.
pub fn estimate_prior(labels: &[usize], classes: usize, smoothing: bool) -> Result<ClassPrior> {
    let mut counts = vec![usize::from(smoothing); classes];
    for &y in labels {
        if y >= classes {
            return Err(Error::Contract(format!("label {y} outside {classes} classes")));
        }
        counts[y] += 1;
    }
    ClassPrior::from_counts(counts)
}

fn check_label(tape_shape: &[usize], y: usize) -> Result<()> {
    match tape_shape {
        [k] if y < *k => Ok(()),
        [k] => Err(Error::Contract(format!("label {y} outside {k} classes"))),
        s => Err(dim_err!("loss expects a logit vector, got {:?}", s)),
    }
}

/// `−log softmax(z)[y]`.
pub fn ce_loss<T: Float>(tape: &mut Tape<T>, z: Var, y: usize) -> Result<Var> {
    check_label(tape.shape(z), y)?;
    let ls = tape.log_softmax(z)?;
    let p = tape.pick(ls, y)?;
    Ok(tape.scale(p, -T::ONE))
}

/// `−log softmax(z + log π)[y]`.
pub fn la_loss<T: Float>(tape: &mut Tape<T>, z: Var, y: usize, prior: &ClassPrior) -> Result<Var> {
    check_label(tape.shape(z), y)?;
    if prior.classes() != tape.shape(z)[0] {
        return Err(dim_err!("prior covers {} classes, logits have {}", prior.classes(), tape.shape(z)[0]));
    }
    let adj: Vec<T> = prior.adjustment().into_iter().map(T::from_f64).collect();
    let adj = tape.constant(Tensor::from_vec(adj));
    let shifted = tape.add(z, adj)?;
    ce_loss(tape, shifted, y)
}

/// Training objective over one sample's logits.
pub trait Loss<T: Float>: Sync {
    fn name(&self) -> &'static str;
    fn loss(&self, tape: &mut Tape<T>, z: Var, y: usize) -> Result<Var>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CrossEntropy;

impl<T: Float> Loss<T> for CrossEntropy {
    fn name(&self) -> &'static str {
        "ce"
    }
    fn loss(&self, tape: &mut Tape<T>, z: Var, y: usize) -> Result<Var> {
        ce_loss(tape, z, y)
    }
}

#[derive(Debug, Clone)]
pub struct LogitAdjusted(pub ClassPrior);

impl<T: Float> Loss<T> for LogitAdjusted {
    fn name(&self) -> &'static str {
        "la"
    }
    fn loss(&self, tape: &mut Tape<T>, z: Var, y: usize) -> Result<Var> {
        la_loss(tape, z, y, &self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    La,
    Ce,
}

impl LossKind {
    pub fn build<T: Float>(self, prior: &ClassPrior) -> Box<dyn Loss<T>> {
        match self {
            LossKind::La => Box::new(LogitAdjusted(prior.clone())),
            LossKind::Ce => Box::new(CrossEntropy),
        }
    }
}

/// Source-domain posterior `softmax(z + log π)` for target logits `z`.
pub fn source_posterior(z: &[f64], prior: &ClassPrior) -> Vec<f64> {
    let a: Vec<f64> = z.iter().zip(&prior.log_probs).map(|(z, l)| z + l).collect();
    let mx = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `argmax_k cos(f, t_k)` over text feature rows.
pub fn zero_shot_predict<T: Float>(f: &[T], text: &[Tensor<T>]) -> Result<usize> {
    let nf = f.iter().map(|&v| v * v).sum::<T>().sqrt();
    if !(nf > T::ZERO) {
        return Err(Error::NumericGuard("image feature has zero norm".into()));
    }
    let mut sims = Vec::with_capacity(text.len());
    for (k, t) in text.iter().enumerate() {
        if t.numel() != f.len() {
            return Err(dim_err!("text feature {k} has {} values, image feature {}", t.numel(), f.len()));
        }
        let nt = t.data().iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(nt > T::ZERO) {
            return Err(Error::NumericGuard(format!("text feature {k} has zero norm")));
        }
        let dot = t.data().iter().zip(f).map(|(&a, &b)| a * b).sum::<T>();
        sims.push(dot / (nf * nt));
    }
    if sims.is_empty() {
        return Err(Error::Contract("no text features to compare against".into()));
    }
    Ok(argmax(&sims))
}
