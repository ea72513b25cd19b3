//! The two training stages, the optimizer, checkpoints and the end-to-end
//! pipeline.

mod checkpoint;
mod optim;
mod pipeline;

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::diffcore::{Tape, Tensor, Var};
use crate::data::Dataset;
use crate::diffcore::sigmoid_scalar;
use crate::error::{Error, Result};
use crate::losses_metrics::{
    accuracy, argmax_rows, compute_pos_weights, cross_entropy, f1_report, multi_label_loss,
    MetricsReport,
};
use crate::model::{self, BoundParams, ModelParameters};
use crate::calibration::{apply_thresholds, ThresholdVector};
use crate::seeds::{self, stream};

pub use checkpoint::{
    format_checkpoint, load_checkpoint, load_checkpoint_for, parse_checkpoint, save_checkpoint,
    CHECKPOINT_HEADER,
};
pub use optim::{sgd_step, sgd_update, Velocity};
pub use pipeline::{
    crossval_stage_one, run_pipeline, run_scratch, CrossValRecord, PipelineConfig, PipelineRecord,
};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub pos_weighting: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_stage1: 30,
            epochs_stage2: 30,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            shuffle: true,
            pos_weighting: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::contract("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Outcome of one training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    /// Sample-weighted mean training loss of each epoch.
    pub losses: Vec<f64>,
    /// Expression accuracy on the training data (stage one only).
    pub train_accuracy: Option<f64>,
    /// AU metrics at 0.5 thresholds on the validation data (stage two only).
    pub validation: Option<MetricsReport>,
    pub seed: u64,
}

impl RunRecord {
    /// `epoch,loss` CSV with 1-based epochs.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(out, "{},{}", i + 1, l);
        }
        out
    }

    pub fn to_kv(&self, prefix: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{prefix}seed={}", self.seed);
        let _ = writeln!(out, "{prefix}epochs={}", self.losses.len());
        if let (Some(first), Some(last)) = (self.losses.first(), self.losses.last()) {
            let _ = writeln!(out, "{prefix}first_epoch_loss={first}");
            let _ = writeln!(out, "{prefix}final_epoch_loss={last}");
        }
        if let Some(acc) = self.train_accuracy {
            let _ = writeln!(out, "{prefix}train_accuracy={acc}");
        }
        if let Some(report) = &self.validation {
            for line in report.to_kv().lines() {
                let _ = writeln!(out, "{prefix}val_{line}");
            }
        }
        out
    }
}

fn run_epochs<F>(
    params: &mut ModelParameters,
    features: &Tensor,
    epochs: usize,
    config: &TrainConfig,
    shuffle_stream: u64,
    mut loss_fn: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&mut Tape, &BoundParams, Var, &[usize]) -> Result<Var>,
{
    config.validate()?;
    let n = features.rows();
    let mut rng = seeds::rng(config.seed, shuffle_stream);
    let mut velocity = Velocity::new(params);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let x = tape.constant(features.select_rows(batch)?);
            let loss = loss_fn(&mut tape, &bound, x, batch)?;
            total += tape.value(loss).item() * batch.len() as f64;
            tape.backward(loss)?;
            params.zero_grad();
            params.pull_grads(&tape, &bound);
            sgd_step(params, config.learning_rate, config.momentum, &mut velocity)?;
        }
        let mean = total / n as f64;
        if !mean.is_finite() {
            return Err(Error::contract("training loss diverged to a non-finite value"));
        }
        losses.push(mean);
    }
    // Gradients of the last batch are stale once the step has been taken.
    for t in params.tensors_mut() {
        *t = t.detached();
    }
    Ok(losses)
}

/// Expression-class predictions for every sample.
pub fn predict_expressions(params: &ModelParameters, ds: &Dataset) -> Result<Vec<usize>> {
    let feats = model::forward_features(params, &ds.features()?)?;
    Ok(argmax_rows(&model::forward_expression(params, &feats)?))
}

pub fn expression_accuracy(params: &ModelParameters, ds: &Dataset) -> Result<f64> {
    accuracy(&predict_expressions(params, ds)?, &ds.expression_labels()?)
}

/// Sigmoid AU probabilities, `samples × num_aus`.
pub fn au_scores(params: &ModelParameters, ds: &Dataset) -> Result<Tensor> {
    let feats = model::forward_features(params, &ds.features()?)?;
    let mut logits = model::forward_au(params, &feats)?;
    logits.data_mut().iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
    Ok(logits)
}

/// AU metrics of `params` on `ds` at the given thresholds (0.5 when `None`).
pub fn evaluate_au(
    params: &ModelParameters,
    ds: &Dataset,
    thresholds: Option<&ThresholdVector>,
) -> Result<MetricsReport> {
    let scores = au_scores(params, ds)?;
    let half;
    let tv = match thresholds {
        Some(tv) => tv,
        None => {
            half = ThresholdVector::uniform(0.5, ds.num_aus)?;
            &half
        }
    };
    f1_report(&apply_thresholds(&scores, tv)?, &ds.au_matrix()?)
}

/// Stage one: backbone plus expression head trained with cross-entropy.
pub fn train_stage_one(
    params: &mut ModelParameters,
    ds: &Dataset,
    config: &TrainConfig,
) -> Result<RunRecord> {
    let labels = ds.expression_labels()?;
    if params.expr_head.is_none() {
        return Err(Error::contract("stage one needs an expression head"));
    }
    if config.epochs_stage1 == 0 {
        config.validate()?;
        return Ok(RunRecord {
            losses: Vec::new(),
            train_accuracy: (!ds.is_empty())
                .then(|| expression_accuracy(params, ds))
                .transpose()?,
            validation: None,
            seed: config.seed,
        });
    }
    let features = ds.features()?;
    let losses = run_epochs(
        params,
        &features,
        config.epochs_stage1,
        config,
        stream::SHUFFLE_STAGE1,
        |tape, bound, x, batch| {
            let feats = model::features(tape, bound, x)?;
            let logits = model::expression_logits(tape, bound, feats)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            cross_entropy(tape, logits, &y)
        },
    )?;
    Ok(RunRecord {
        losses,
        train_accuracy: Some(expression_accuracy(params, ds)?),
        validation: None,
        seed: config.seed,
    })
}

/// Stage two: AU head (and the backbone unless frozen) trained with the
/// multi-label loss.
pub fn train_stage_two(
    params: &mut ModelParameters,
    ds: &Dataset,
    validation: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<RunRecord> {
    let labels = ds.au_matrix()?;
    if params.au_head.is_none() {
        return Err(Error::contract("stage two needs an AU head"));
    }
    config.validate()?;
    let losses = if config.epochs_stage2 == 0 {
        Vec::new()
    } else {
        let features = ds.features()?;
        let targets = labels.to_tensor()?;
        let weights = config.pos_weighting.then(|| compute_pos_weights(&labels));
        run_epochs(
            params,
            &features,
            config.epochs_stage2,
            config,
            stream::SHUFFLE_STAGE2,
            |tape, bound, x, batch| {
                let feats = model::features(tape, bound, x)?;
                let logits = model::au_logits(tape, bound, feats)?;
                let y = targets.select_rows(batch)?;
                multi_label_loss(tape, logits, &y, weights.as_deref())
            },
        )?
    };
    let validation = validation
        .map(|v| evaluate_au(params, v, None))
        .transpose()?;
    Ok(RunRecord {
        losses,
        train_accuracy: None,
        validation,
        seed: config.seed,
    })
}
