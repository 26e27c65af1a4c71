use serde::{Deserialize, Serialize};

use crate::data::{ConnectomeDataset, ASD, HC};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Tensor;

/// Subjects per inference batch.
const EVAL_CHUNK: usize = 32;

/// Area under the ROC curve via the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs where the positive scores higher, ties 0.5.
pub fn auroc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Metric(format!("label {l} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of 1-based mid-ranks of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, q) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(predicted: &[usize], labels: &[usize]) -> Self {
        let mut c = Self::default();
        for (&p, &l) in predicted.iter().zip(labels) {
            match (p == ASD, l == ASD) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auroc: f64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub confusion: Confusion,
}

impl Metrics {
    /// Sensitivity or specificity is 0 when its class is absent.
    pub fn new(auroc: f64, confusion: Confusion) -> Self {
        let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
        Self {
            auroc,
            accuracy: ratio(confusion.tp + confusion.tn, confusion.fp + confusion.fn_),
            sensitivity: ratio(confusion.tp, confusion.fn_),
            specificity: ratio(confusion.tn, confusion.fp),
            confusion,
        }
    }
}

/// How a class is predicted from the logits.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum ThresholdRule {
    /// ASD iff its logit is strictly larger (ties go to HC).
    #[default]
    Argmax,
    /// ASD iff `softmax(logits)[ASD] > t`.
    Score(f64),
}

/// Anything that maps a `[B, N, N]` batch to `[B, C]` logits.
pub trait Classifier {
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
}

impl Classifier for Model {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Model::logits(self, x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// `softmax(logits)[ASD]` per subject.
    pub scores: Vec<f64>,
    pub predicted: Vec<usize>,
    pub labels: Vec<usize>,
}

fn asd_probability(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    (logits[ASD] - max).exp() / total
}

pub fn predict(model: &impl Classifier, dataset: &ConnectomeDataset, rule: ThresholdRule) -> Result<Predictions> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let mut scores = Vec::with_capacity(dataset.len());
    let mut predicted = Vec::with_capacity(dataset.len());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let logits = model.logits(&dataset.batch(chunk)?)?;
        for row in logits.rows() {
            let score = asd_probability(row);
            let asd = match rule {
                ThresholdRule::Argmax => row[ASD] > row[HC],
                ThresholdRule::Score(t) => score > t,
            };
            scores.push(score);
            predicted.push(if asd { ASD } else { HC });
        }
    }
    Ok(Predictions {
        scores,
        predicted,
        labels: dataset.labels(),
    })
}

/// AUROC of the ASD probability plus confusion-based metrics.
pub fn evaluate(model: &impl Classifier, dataset: &ConnectomeDataset, rule: ThresholdRule) -> Result<Metrics> {
    let p = predict(model, dataset, rule)?;
    let auc = auroc(&p.scores, &p.labels)?;
    Ok(Metrics::new(auc, Confusion::from_predictions(&p.predicted, &p.labels)))
}
