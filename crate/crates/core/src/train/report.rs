use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::predict;
use super::{Model, TrainConfig};
use crate::classifier::class_means;
use crate::data::LabeledDataset;
use crate::error::Result;
use crate::metrics::{accuracy_by_split, cosine_similarity_matrix, train_test_gap, ShotSplits, SplitAccuracy};
use crate::peft::PeftVariant;
use crate::tensor::{Float, Tensor};
use crate::tte::TteConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Accuracy of the training forward passes during the epoch.
    pub train_accuracy: SplitAccuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InventoryEntry {
    pub name: String,
    pub count: u64,
}

/// Trainable tensors grouped by component. Backbone tensors unfrozen by a
/// PEFT variant count toward `peft_total`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inventory {
    pub entries: Vec<InventoryEntry>,
    pub peft_total: u64,
    pub classifier_total: u64,
    pub backbone_total: u64,
    pub trainable_total: u64,
}

/// Post-training analysis payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    /// Training-set accuracy under eval preprocessing.
    pub train_eval: SplitAccuracy,
    pub test: SplitAccuracy,
    pub train_test_gap: SplitAccuracy,
    pub learned_scales: Option<Vec<f64>>,
    pub weight_norms: Vec<f64>,
    /// Cosine similarity between class-mean training features.
    pub class_mean_similarity: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub classes: usize,
    pub train_counts: Vec<usize>,
    pub splits: ShotSplits,
    pub epochs: Vec<EpochRecord>,
    pub test: SplitAccuracy,
    pub test_tte: Option<SplitAccuracy>,
    pub inventory: Inventory,
    pub analysis: Analysis,
    pub warnings: Vec<String>,
}

pub fn inventory<T: Float>(model: &Model<T>) -> Inventory {
    let mut entries = Vec::new();
    let (mut peft, mut head, mut backbone) = (0u64, 0u64, 0u64);
    for p in model.backbone.store.iter().filter(|p| p.trainable) {
        let n = p.value.numel() as u64;
        if model.peft.unfrozen.contains(&p.name) {
            peft += n;
        } else {
            backbone += n;
        }
        entries.push(InventoryEntry { name: p.name.clone(), count: n });
    }
    for p in model.peft.store.iter().filter(|p| p.trainable) {
        peft += p.value.numel() as u64;
        entries.push(InventoryEntry { name: p.name.clone(), count: p.value.numel() as u64 });
    }
    for p in model.head.store.iter().filter(|p| p.trainable) {
        head += p.value.numel() as u64;
        entries.push(InventoryEntry { name: p.name.clone(), count: p.value.numel() as u64 });
    }
    Inventory { entries, peft_total: peft, classifier_total: head, backbone_total: backbone, trainable_total: peft + head + backbone }
}

/// Weight norms, scales, class-mean similarity and train/test gaps.
pub fn analyze<T: Float>(
    model: &Model<T>,
    train: &LabeledDataset,
    train_counts: &[usize],
    test: &SplitAccuracy,
) -> Result<Analysis> {
    let out = predict(model, train, &TteConfig::off())?;
    let preds: Vec<usize> = out.iter().map(|(p, _)| *p).collect();
    let train_eval = accuracy_by_split(&preds, train.labels(), &ShotSplits::from_counts(train_counts))?;
    let feats: Vec<Tensor<T>> = out.into_iter().map(|(_, f)| f).collect();
    let means = class_means(&feats, train.labels(), train.classes())?;
    let fd = means.shape()[1];
    let rows: Vec<Vec<f64>> = means.data().chunks(fd).map(|r| r.iter().map(|v| v.to_f64()).collect()).collect();
    Ok(Analysis {
        train_eval,
        test: *test,
        train_test_gap: train_test_gap(&train_eval, test),
        learned_scales: (model.peft.variant() == PeftVariant::Adaptformer).then(|| model.peft.learned_scales()).transpose()?,
        weight_norms: model.head.weight_norms().data().iter().map(|v| v.to_f64()).collect(),
        class_mean_similarity: cosine_similarity_matrix(&rows),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the analysis CSV files into `dir`.
pub fn write_analysis_files(dir: &Path, a: &Analysis) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut s = String::from("class,weight_norm\n");
    for (k, v) in a.weight_norms.iter().enumerate() {
        let _ = writeln!(s, "{k},{v}");
    }
    fs::write(dir.join("weight_norms.csv"), s)?;

    let mut s = String::new();
    for row in &a.class_mean_similarity {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    fs::write(dir.join("class_similarity.csv"), s)?;

    if let Some(scales) = &a.learned_scales {
        let mut s = String::from("layer,scale\n");
        for (l, v) in scales.iter().enumerate() {
            let _ = writeln!(s, "{l},{v}");
        }
        fs::write(dir.join("learned_scales.csv"), s)?;
    }

    let mut s = String::from("split,train,test,gap\n");
    let names = ["overall", "many", "medium", "few"];
    let (tr, te, g) = (a.train_eval.as_array(), a.test.as_array(), a.train_test_gap.as_array());
    for i in 0..4 {
        let _ = writeln!(s, "{},{},{},{}", names[i], fmt_opt(tr[i]), fmt_opt(te[i]), fmt_opt(g[i]));
    }
    fs::write(dir.join("gaps.csv"), s)?;
    Ok(())
}

/// Writes `report.json`, `epochs.csv` and the analysis CSV files into `dir`.
pub fn write_report_files(dir: &Path, r: &RunReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(r)?)?;
    let mut s = String::from("epoch,lr,train_loss,acc_overall,acc_many,acc_medium,acc_few\n");
    for e in &r.epochs {
        let a = e.train_accuracy.as_array();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            e.epoch,
            e.lr,
            e.train_loss,
            fmt_opt(a[0]),
            fmt_opt(a[1]),
            fmt_opt(a[2]),
            fmt_opt(a[3])
        );
    }
    fs::write(dir.join("epochs.csv"), s)?;
    write_analysis_files(dir, &r.analysis)
}
