//! Shot-split accuracy and related reporting helpers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANY_SHOT_ABOVE: usize = 100;
pub const FEW_SHOT_BELOW: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Many,
    Medium,
    Few,
}

impl Split {
    /// `> 100` many, `20..=100` medium, `< 20` few.
    pub fn of_count(n: usize) -> Split {
        if n > MANY_SHOT_ABOVE {
            Split::Many
        } else if n >= FEW_SHOT_BELOW {
            Split::Medium
        } else {
            Split::Few
        }
    }
}

/// Partition of classes by training count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotSplits {
    pub many: Vec<usize>,
    pub medium: Vec<usize>,
    pub few: Vec<usize>,
}

impl ShotSplits {
    pub fn from_counts(counts: &[usize]) -> Self {
        let mut s = ShotSplits { many: Vec::new(), medium: Vec::new(), few: Vec::new() };
        for (k, &n) in counts.iter().enumerate() {
            match Split::of_count(n) {
                Split::Many => s.many.push(k),
                Split::Medium => s.medium.push(k),
                Split::Few => s.few.push(k),
            }
        }
        s
    }

    pub fn classes(&self) -> usize {
        self.many.len() + self.medium.len() + self.few.len()
    }

    /// Split label of every class, indexed by class.
    pub fn labels(&self) -> Vec<Split> {
        let mut out = vec![Split::Few; self.classes()];
        for &k in &self.many {
            out[k] = Split::Many;
        }
        for &k in &self.medium {
            out[k] = Split::Medium;
        }
        out
    }
}

/// Accuracy overall and per split; a split with no test samples is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct SplitAccuracy {
    pub overall: Option<f64>,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

impl SplitAccuracy {
    pub fn as_array(&self) -> [Option<f64>; 4] {
        [self.overall, self.many, self.medium, self.few]
    }
}

pub fn accuracy_by_split(predictions: &[usize], labels: &[usize], splits: &ShotSplits) -> Result<SplitAccuracy> {
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let of = splits.labels();
    let mut hit = [0usize; 4];
    let mut tot = [0usize; 4];
    for (&p, &y) in predictions.iter().zip(labels) {
        let s = *of
            .get(y)
            .ok_or_else(|| Error::Contract(format!("label {y} outside {} classes", of.len())))?;
        let slot = 1 + s as usize;
        let ok = usize::from(p == y);
        tot[0] += 1;
        hit[0] += ok;
        tot[slot] += 1;
        hit[slot] += ok;
    }
    let acc = |i: usize| (tot[i] > 0).then(|| hit[i] as f64 / tot[i] as f64);
    Ok(SplitAccuracy { overall: acc(0), many: acc(1), medium: acc(2), few: acc(3) })
}

/// Train minus test accuracy per split; `None` where either side is absent.
pub fn train_test_gap(train: &SplitAccuracy, test: &SplitAccuracy) -> SplitAccuracy {
    let d = |a: Option<f64>, b: Option<f64>| Some(a? - b?);
    SplitAccuracy {
        overall: d(train.overall, test.overall),
        many: d(train.many, test.many),
        medium: d(train.medium, test.medium),
        few: d(train.few, test.few),
    }
}

/// Symmetric `K×K` cosine similarities between rows.
pub fn cosine_similarity_matrix(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let k = rows.len();
    let mut m = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i..k {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let c = if i == j && norms[i] > 0.0 { 1.0 } else { dot / (norms[i] * norms[j]) };
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    m
}
