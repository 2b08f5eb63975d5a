//! Minibatch SGD with momentum on the multilabel BCE objective.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{stable_sigmoid, NormMode, Tape};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::labels::DecisionRule;
use crate::metrics::{table3_report, MetricsReport, ScoreMatrix};
use crate::model::{ForwardOptions, Model, NORM_MOMENTUM};
use crate::tensor::Tensor;

/// Images per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Evaluate every this many epochs (0: only after the last epoch).
    pub eval_every: usize,
    pub decision_rule: DecisionRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            eval_every: 1,
            decision_rule: DecisionRule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        // zero is allowed: a frozen run is a useful control
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("learning_rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be finite and non-negative"));
        }
        self.decision_rule.validate()
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sample loss over the epoch.
    pub mean_loss: f64,
    pub batches: usize,
    pub eval: Option<MetricsReport>,
    /// Kept out of the log so identical runs produce identical files.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }

    pub fn last_eval(&self) -> Option<&MetricsReport> {
        self.epochs.iter().rev().find_map(|e| e.eval.as_ref())
    }

    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        for record in &self.epochs {
            serde_json::to_writer(&mut *out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }
}

/// In place: `v <- momentum * v + g + weight_decay * p`, then `p <- p - lr * v`.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[&[f64]],
    velocity: &mut [Vec<f64>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(format!(
            "sgd_step got {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(velocity.iter()).enumerate() {
        if p.numel() != g.len() || p.numel() != v.len() {
            return Err(Error::shape(format!(
                "parameter {i}: {} values, {} grads, {} velocities",
                p.numel(),
                g.len(),
                v.len()
            )));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pj, gj), vj) in p.data_mut().iter_mut().zip(*g).zip(v.iter_mut()) {
            *vj = momentum * *vj + gj + weight_decay * *pj;
            *pj -= lr * *vj;
        }
    }
    Ok(())
}

/// Trains `model` in place. With `eval_set`, evaluation runs on the schedule set
/// by `eval_every` and always after the last epoch.
pub fn train(model: &mut Model, train_set: &Dataset, eval_set: Option<&Dataset>, config: &TrainConfig) -> Result<TrainReport> {
    train_observed(model, train_set, eval_set, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_observed(
    model: &mut Model,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    config.validate()?;
    check_dataset(model, train_set)?;
    if let Some(eval) = eval_set {
        check_dataset(model, eval)?;
    }

    let norm_mode = if model.config().use_batch_norm {
        NormMode::Train
    } else {
        NormMode::Frozen
    };
    let options = ForwardOptions {
        norm_mode,
        drop_skip: None,
    };
    let mut velocity: Vec<Vec<f64>> = model
        .parameters()
        .iter()
        .map(|(_, t)| vec![0.0; t.numel()])
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = TrainReport::default();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (batch_index, batch) in train_set.batches(config.batch_size, rng.random(), true)?.enumerate() {
            let mut tape = Tape::new();
            let input = tape.leaf(batch.images, false);
            let pass = model.record(&mut tape, input, options, true)?;
            let loss = tape.bce_loss(pass.logits, &batch.targets)?;
            let value = tape.value(loss).data()[0];
            let non_finite = || Error::NonFinite {
                loss: value,
                epoch,
                batch: batch_index,
                learning_rate: config.learning_rate,
            };
            if !value.is_finite() {
                return Err(non_finite());
            }
            tape.backward(loss)?;
            let grads: Vec<&[f64]> = pass
                .params
                .iter()
                .map(|&p| tape.grad(p).expect("parameters require grad"))
                .collect();
            if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(non_finite());
            }
            sgd_step(
                &mut model.parameters_mut(),
                &grads,
                &mut velocity,
                config.learning_rate,
                config.momentum,
                config.weight_decay,
            )?;
            if norm_mode == NormMode::Train {
                model.update_running_stats(&tape, &pass.norm_outputs, NORM_MOMENTUM);
            }
            loss_sum += value * batch.indices.len() as f64;
            batches += 1;
        }

        let last = epoch == config.epochs;
        let due = config.eval_every > 0 && epoch % config.eval_every == 0;
        let eval = match eval_set {
            Some(set) if last || due => Some(evaluate(model, set, config.decision_rule)?),
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / train_set.len() as f64,
            batches,
            eval,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        report.epochs.push(record);
    }
    Ok(report)
}

fn check_dataset(model: &Model, set: &Dataset) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Validation("dataset is empty".into()));
    }
    if set.manifest.num_classes() != model.num_classes() {
        return Err(Error::Validation(format!(
            "dataset has {} classes but the model predicts {}",
            set.manifest.num_classes(),
            model.num_classes()
        )));
    }
    Ok(())
}

/// Scores every image with batch norm frozen and computes the full metric suite.
pub fn evaluate(model: &Model, set: &Dataset, rule: DecisionRule) -> Result<MetricsReport> {
    check_dataset(model, set)?;
    evaluate_with(set, rule, |batch| {
        let logits = model.forward(batch)?;
        Ok(logits.data().iter().map(|&z| stable_sigmoid(z)).collect())
    })
}

/// Evaluation with an arbitrary scorer mapping an image batch `[B, 3, H, W]`
/// to `B x C` row-major probabilities. Rows are visited in ascending image id.
pub fn evaluate_with(
    set: &Dataset,
    rule: DecisionRule,
    mut scorer: impl FnMut(&Tensor) -> Result<Vec<f64>>,
) -> Result<MetricsReport> {
    let classes = set.manifest.num_classes();
    let mut scores = Vec::with_capacity(set.len() * classes);
    let mut order = Vec::with_capacity(set.len());
    for batch in set.batches(EVAL_CHUNK, 0, false)? {
        let probs = scorer(&batch.images)?;
        if probs.len() != batch.indices.len() * classes {
            return Err(Error::shape(format!(
                "scorer returned {} values for {} images x {classes} classes",
                probs.len(),
                batch.indices.len()
            )));
        }
        scores.extend(probs);
        order.extend(batch.indices);
    }
    let row_ids = order.iter().map(|&i| set.manifest.images[i].id.to_string()).collect();
    let column_ids = set.manifest.categories.names();
    let score = ScoreMatrix::with_ids(scores, row_ids, column_ids)?;
    let labels: Vec<_> = order.iter().map(|&i| set.manifest.images[i].labels.clone()).collect();
    let target = crate::metrics::TargetMatrix::from_labels(&labels)?;
    table3_report(&score, &target, rule)
}
