//! Mini-batch Adam training with early stopping on validation AUROC, and the
//! evaluation metrics.

mod metrics;

pub use metrics::{auroc, evaluate, predict, Classifier, Confusion, Metrics, Predictions, ThresholdRule};

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ConnectomeDataset;
use crate::error::{Error, Result};
use crate::model::{bind_params, build_graph, total_loss, Model, ModelConfig, ModelParams, RngState};
use crate::numerics::{AdamState, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: 64,
            max_epochs: 50,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be ≥ 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be ≥ 0".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if self.batch_size < 2 && model.lambda > 0.0 && model.num_experts > 1 {
            return Err(Error::Config("batch_size must be ≥ 2 when lambda > 0".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "patience ({}) exceeds max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of the total loss over the epoch's batches.
    pub train_loss: f64,
    pub val_auroc: f64,
    /// Mean of the per-batch CV² over the epoch (0 without a gate).
    pub cv2: f64,
    /// Gate probability per expert, averaged over the epoch's samples.
    pub gate_mean: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub cross_entropy: f64,
    pub cv2: f64,
    /// Per-expert sums of π over the batch.
    pub gate_sums: Vec<f64>,
}

/// Forward, loss, backward and one Adam update on a single batch. Returns
/// the statistics of the pre-update forward pass.
pub fn train_step(
    config: &ModelConfig,
    params: &mut ModelParams,
    adam: &mut AdamState,
    x: &Tensor,
    labels: &[usize],
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let xv = tape.constant(x.clone());
    let graph = build_graph(&mut tape, config, &bound, xv)?;
    let pi = graph.moe.as_ref().filter(|m| m.gate.is_some()).map(|m| m.gate_probs);
    let loss = total_loss(&mut tape, graph.logits, labels, pi, config.lambda, config.cv_eps)?;
    let value = tape.value(loss.total).item();
    let stats = StepStats {
        loss: value,
        cross_entropy: tape.value(loss.cross_entropy).item(),
        cv2: loss.cv_squared.map_or(0.0, |v| tape.value(v).item()),
        gate_sums: match &graph.moe {
            Some(moe) => {
                let probs = tape.value(moe.gate_probs);
                let e = probs.last_dim();
                (0..e).map(|k| probs.rows().map(|r| r[k]).sum()).collect()
            }
            None => Vec::new(),
        },
    };
    if !value.is_finite() {
        return Ok(stats);
    }
    tape.backward(loss.total)?;
    let grads: Vec<Vec<f64>> = bound
        .leaves()
        .into_iter()
        .zip(params.leaves())
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();
    let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    adam.step(&mut params.leaves_mut(), &grad_refs)?;
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the highest validation AUROC.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auroc: f64,
    /// Shuffle stream position after the last epoch.
    pub rng_state: RngState,
}

/// Trains a copy of `model` on `train`, keeping the snapshot with strictly
/// best validation AUROC and stopping after `patience` epochs without one.
pub fn train(
    model: &Model,
    train: &ConnectomeDataset,
    val: &ConnectomeDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate(&model.config)?;
    model.config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if !val.has_both_classes() {
        return Err(Error::Metric("validation set needs both classes".into()));
    }
    for ds in [train, val] {
        if ds.n_rois != model.config.n_rois {
            return Err(Error::Config(format!(
                "dataset has {} ROIs, model expects {}",
                ds.n_rois, model.config.n_rois
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(config.lr, config.weight_decay);
    let mut current = model.clone();
    let mut best = model.clone();
    let mut best_auroc = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut cv2_sum = 0.0;
        let mut batches = 0;
        let mut gate_sums: Vec<f64> = Vec::new();
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let x = train.batch(chunk)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.subjects[i].label).collect();
            let stats = train_step(&current.config, &mut current.params, &mut adam, &x, &labels)?;
            if !stats.loss.is_finite() || !current.params.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: stats.loss,
                });
            }
            loss_sum += stats.loss * chunk.len() as f64;
            cv2_sum += stats.cv2;
            batches += 1;
            gate_sums.resize(stats.gate_sums.len(), 0.0);
            for (g, s) in gate_sums.iter_mut().zip(&stats.gate_sums) {
                *g += s;
            }
        }
        let n = train.len() as f64;
        let val_auroc = evaluate(&current, val, ThresholdRule::Argmax)?.auroc;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            val_auroc,
            cv2: cv2_sum / batches as f64,
            gate_mean: gate_sums.iter().map(|g| g / n).collect(),
        });
        if val_auroc > best_auroc {
            best_auroc = val_auroc;
            best_epoch = epoch;
            best = current.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
        best_val_auroc: best_auroc,
        rng_state: RngState {
            algorithm: "ChaCha8Rng".into(),
            seed: config.seed,
            word_pos: rng.get_word_pos().to_string(),
        },
    })
}

/// CSV text with header `epoch,train_loss,val_auroc,cv2,gate_mean_e0,...`.
pub fn history_csv(history: &[EpochRecord]) -> Result<String> {
    let experts = history.first().map_or(0, |r| r.gate_mean.len());
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["epoch", "train_loss", "val_auroc", "cv2"].map(String::from).to_vec();
    header.extend((0..experts).map(|e| format!("gate_mean_e{e}")));
    let io = |e: csv::Error| Error::Data(format!("history: {e}"));
    writer.write_record(&header).map_err(io)?;
    for r in history {
        let mut row = vec![
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.val_auroc.to_string(),
            r.cv2.to_string(),
        ];
        row.extend(r.gate_mean.iter().map(f64::to_string));
        writer.write_record(&row).map_err(io)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Data(format!("history: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_history(history: &[EpochRecord], path: &Path) -> Result<()> {
    fs::write(path, history_csv(history)?).map_err(|e| Error::io(path, e))
}
