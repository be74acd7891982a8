use serde::{Deserialize, Serialize};

use super::{Checkpoint, Model};
use crate::data::{preprocess_eval, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::argmax;
use crate::metrics::{accuracy_by_split, ShotSplits, SplitAccuracy};
use crate::parallel;
use crate::tensor::{Float, Tensor};
use crate::tte::{ensemble_logits, TteConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub predictions: Vec<usize>,
    pub accuracy: SplitAccuracy,
}

/// Per-sample `(prediction, feature of the first view)`, in dataset order.
///
/// With TTE active the prediction is the argmax of the five-crop mean logits.
pub fn predict<T: Float>(model: &Model<T>, ds: &LabeledDataset, tte: &TteConfig) -> Result<Vec<(usize, Tensor<T>)>> {
    if ds.classes() != model.head.classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, model predicts {}",
            ds.classes(),
            model.head.classes()
        )));
    }
    let size = model.backbone.config.image_size;
    parallel::try_map_indexed(ds.len(), |i| {
        let views = preprocess_eval::<T>(ds, i, size, tte)?;
        let mut logits = Vec::with_capacity(views.len());
        let mut first = None;
        for v in &views {
            let (z, f) = model.infer(v)?;
            first.get_or_insert(f);
            logits.push(z);
        }
        let z = if logits.len() == 1 { logits.pop().expect("one view") } else { ensemble_logits(&logits)? };
        Ok((argmax(z.data()), first.expect("at least one view")))
    })
}

/// Accuracy by split, where splits come from the training counts.
pub fn evaluate<T: Float>(
    model: &Model<T>,
    ds: &LabeledDataset,
    train_counts: &[usize],
    tte: &TteConfig,
) -> Result<EvalOutput> {
    if train_counts.len() != ds.classes() {
        return Err(Error::Config(format!(
            "training counts cover {} classes, dataset has {}",
            train_counts.len(),
            ds.classes()
        )));
    }
    let predictions: Vec<usize> = predict(model, ds, tte)?.into_iter().map(|(p, _)| p).collect();
    let accuracy = accuracy_by_split(&predictions, ds.labels(), &ShotSplits::from_counts(train_counts))?;
    Ok(EvalOutput { predictions, accuracy })
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, ds: &LabeledDataset, tte: &TteConfig) -> Result<EvalOutput> {
    evaluate(&ckpt.model, ds, &ckpt.train_counts, tte)
}
