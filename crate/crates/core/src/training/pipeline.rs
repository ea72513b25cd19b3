use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::calibration::{apply_thresholds, calibrate_thresholds, default_grid, Calibration, ThresholdVector};
use crate::data::{generate_synthetic, split_subject_folds, Dataset, GenConfig};
use crate::error::{Error, Result};
use crate::losses_metrics::{f1_report, MetricsReport};
use crate::model::{init_parameters, transfer_backbone, ModelConfig, ModelParameters};
use crate::seeds::{self, stream};

use super::{au_scores, expression_accuracy, train_stage_one, train_stage_two, RunRecord, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    /// Cross-validation folds for stage one.
    pub folds: usize,
    /// Share of subjects whose samples form the expression (stage-one) set.
    pub stage_one_fraction: f64,
    /// Share of the remaining subjects held out for validation.
    pub validation_fraction: f64,
    /// Share of stage-two training samples whose AU labels are used.
    pub au_label_fraction: f64,
    pub grid: Vec<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            gen: GenConfig::default(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            folds: 5,
            stage_one_fraction: 0.5,
            validation_fraction: 0.4,
            au_label_fraction: 1.0,
            grid: default_grid(),
        }
    }
}

impl PipelineConfig {
    /// Seeds both the generator and the trainer from one master seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.gen.seed = seeds::derive(seed, stream::DATA);
        self.train.seed = seeds::derive(seed, stream::TRAIN);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.train.validate()?;
        self.model.validate()?;
        let (g, m) = (&self.gen, &self.model);
        if (g.input_dim, g.num_aus, g.num_expressions) != (m.input_dim, m.num_aus, m.num_expressions) {
            return Err(Error::contract(format!(
                "data shape (input {}, AUs {}, expressions {}) does not match model ({}, {}, {})",
                g.input_dim, g.num_aus, g.num_expressions, m.input_dim, m.num_aus, m.num_expressions
            )));
        }
        for (name, v) in [
            ("stage_one_fraction", self.stage_one_fraction),
            ("validation_fraction", self.validation_fraction),
            ("au_label_fraction", self.au_label_fraction),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::contract(format!("{name} must lie in (0, 1]")));
            }
        }
        Ok(())
    }

    fn echo(&self) -> String {
        let (g, t, m) = (&self.gen, &self.train, &self.model);
        let list = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let _ = writeln!(out, "gen.num_subjects={}", g.num_subjects);
        let _ = writeln!(out, "gen.samples_per_subject={}", g.samples_per_subject);
        let _ = writeln!(out, "gen.num_expressions={}", g.num_expressions);
        let _ = writeln!(out, "gen.num_aus={}", g.num_aus);
        let _ = writeln!(out, "gen.input_dim={}", g.input_dim);
        let _ = writeln!(out, "gen.noise_sigma={}", g.noise_sigma);
        let _ = writeln!(out, "gen.subject_offset_sigma={}", g.subject_offset_sigma);
        let _ = writeln!(out, "gen.au_flip_prob={}", g.au_flip_prob);
        let _ = writeln!(out, "gen.imbalance_skew={}", g.imbalance_skew);
        let _ = writeln!(out, "gen.seed={}", g.seed);
        let _ = writeln!(out, "train.epochs_stage1={}", t.epochs_stage1);
        let _ = writeln!(out, "train.epochs_stage2={}", t.epochs_stage2);
        let _ = writeln!(out, "train.batch_size={}", t.batch_size);
        let _ = writeln!(out, "train.learning_rate={}", t.learning_rate);
        let _ = writeln!(out, "train.momentum={}", t.momentum);
        let _ = writeln!(out, "train.seed={}", t.seed);
        let _ = writeln!(out, "train.shuffle={}", t.shuffle);
        let _ = writeln!(out, "train.pos_weighting={}", t.pos_weighting);
        let _ = writeln!(out, "model.backbone_layers={}", list(&m.backbone_layers));
        let _ = writeln!(out, "model.au_head_hidden={}", list(&m.au_head_hidden));
        let _ = writeln!(out, "model.freeze_backbone_in_stage2={}", m.freeze_backbone_in_stage2);
        let _ = writeln!(out, "folds={}", self.folds);
        let _ = writeln!(out, "stage_one_fraction={}", self.stage_one_fraction);
        let _ = writeln!(out, "validation_fraction={}", self.validation_fraction);
        let _ = writeln!(out, "au_label_fraction={}", self.au_label_fraction);
        let grid: Vec<String> = self.grid.iter().map(ToString::to_string).collect();
        let _ = writeln!(out, "grid={}", grid.join(","));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossValRecord {
    /// Held-out subject ids per fold.
    pub folds: Vec<Vec<u32>>,
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub runs: Vec<RunRecord>,
}

impl CrossValRecord {
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (i, acc) in self.fold_accuracies.iter().enumerate() {
            let _ = writeln!(out, "fold{}_accuracy={acc}", i + 1);
        }
        let _ = writeln!(out, "mean_accuracy={}", self.mean_accuracy);
        out
    }
}

fn init_seed(train: &TrainConfig) -> u64 {
    seeds::derive(train.seed, stream::INIT)
}

/// Subject-independent k-fold evaluation of stage one. Every fold starts
/// from the same initialisation, so results do not depend on fold order.
pub fn crossval_stage_one(
    ds: &Dataset,
    model: &ModelConfig,
    train: &TrainConfig,
    k: usize,
) -> Result<CrossValRecord> {
    let split = split_subject_folds(ds, k, train.seed)?;
    let init = init_seed(train);
    let results: Vec<(RunRecord, f64)> = (0..k)
        .into_par_iter()
        .map(|i| {
            let mut params = init_parameters(model, init)?;
            let run = train_stage_one(&mut params, &ds.subset(&split.train[i]), train)?;
            let acc = expression_accuracy(&params, &ds.subset(&split.validation[i]))?;
            Ok((run, acc))
        })
        .collect::<Result<_>>()?;
    let (runs, fold_accuracies): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let mean_accuracy = fold_accuracies.iter().sum::<f64>() / k as f64;
    Ok(CrossValRecord {
        folds: split.folds,
        fold_accuracies,
        mean_accuracy,
        runs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineRecord {
    pub config: PipelineConfig,
    /// `None` for the scratch baseline.
    pub crossval: Option<CrossValRecord>,
    pub stage_one: Option<RunRecord>,
    pub stage_two: RunRecord,
    /// Number of AU-labelled samples stage two trained on.
    pub stage_two_train_samples: usize,
    pub validation_samples: usize,
    /// Thresholds tuned on the whole validation set.
    pub calibration: Calibration,
    pub pre_macro_f1: f64,
    pub post_macro_f1: f64,
    pub post_report: MetricsReport,
    /// Thresholds tuned on validation half A, reported on half B.
    pub split_thresholds: ThresholdVector,
    pub split_pre_macro_f1: f64,
    pub split_post_macro_f1: f64,
    pub params: ModelParameters,
    pub pretrained: Option<ModelParameters>,
}

impl PipelineRecord {
    pub fn to_kv(&self) -> String {
        let mut out = self.config.echo();
        let mode = if self.crossval.is_some() { "transfer" } else { "scratch" };
        let _ = writeln!(out, "mode={mode}");
        if let Some(cv) = &self.crossval {
            for line in cv.to_kv().lines() {
                let _ = writeln!(out, "stage1.cv_{line}");
            }
        }
        if let Some(r) = &self.stage_one {
            out.push_str(&r.to_kv("stage1."));
        }
        out.push_str(&self.stage_two.to_kv("stage2."));
        let _ = writeln!(out, "stage2.train_samples={}", self.stage_two_train_samples);
        let _ = writeln!(out, "validation_samples={}", self.validation_samples);
        let _ = writeln!(out, "thresholds={}", self.calibration.thresholds);
        let _ = writeln!(out, "pre_calibration_macro_f1={}", self.pre_macro_f1);
        let _ = writeln!(out, "post_calibration_macro_f1={}", self.post_macro_f1);
        let _ = writeln!(out, "split_thresholds={}", self.split_thresholds);
        let _ = writeln!(out, "split_pre_calibration_macro_f1={}", self.split_pre_macro_f1);
        let _ = writeln!(out, "split_post_calibration_macro_f1={}", self.split_post_macro_f1);
        for line in self.post_report.to_kv().lines() {
            let _ = writeln!(out, "calibrated_{line}");
        }
        out
    }
}

struct Prepared {
    stage_one: Dataset,
    stage_two_train: Dataset,
    validation: Dataset,
    validation_a: Dataset,
    validation_b: Dataset,
}

fn strip_au(mut ds: Dataset) -> Dataset {
    ds.samples.iter_mut().for_each(|s| s.au_labels = None);
    ds
}

fn strip_expression(mut ds: Dataset) -> Dataset {
    ds.samples.iter_mut().for_each(|s| s.expression = None);
    ds
}

fn prepare(config: &PipelineConfig) -> Result<Prepared> {
    config.validate()?;
    let ds = generate_synthetic(&config.gen)?;
    let mut subjects = ds.subjects();
    subjects.shuffle(&mut seeds::rng(config.train.seed, stream::SPLIT));

    let n = subjects.len();
    let n1 = ((n as f64 * config.stage_one_fraction).round() as usize).min(n);
    let rest = n - n1;
    let n_val = ((rest as f64 * config.validation_fraction).round() as usize).max(2);
    if n1 < config.folds || rest < n_val + 1 {
        return Err(Error::contract(format!(
            "{n} subjects are too few: need {} for stage one and at least 3 for stage two",
            config.folds
        )));
    }
    let pick = |s: &[u32]| ds.indices_of_subjects(&s.iter().copied().collect::<BTreeSet<_>>());
    let (s1, s2) = subjects.split_at(n1);
    let (val, train) = s2.split_at(n_val);
    let (val_a, val_b) = val.split_at(n_val.div_ceil(2));

    let mut train_idx = pick(train);
    if config.au_label_fraction < 1.0 {
        let keep = ((train_idx.len() as f64 * config.au_label_fraction).round() as usize).max(1);
        train_idx.shuffle(&mut seeds::rng(config.train.seed, stream::LABEL_SUBSET));
        train_idx.truncate(keep);
        train_idx.sort_unstable();
    }

    Ok(Prepared {
        stage_one: strip_au(ds.subset(&pick(s1))),
        stage_two_train: strip_expression(ds.subset(&train_idx)),
        validation: strip_expression(ds.subset(&pick(val))),
        validation_a: strip_expression(ds.subset(&pick(val_a))),
        validation_b: strip_expression(ds.subset(&pick(val_b))),
    })
}

fn finish(
    config: &PipelineConfig,
    data: &Prepared,
    mut params: ModelParameters,
    crossval: Option<CrossValRecord>,
    stage_one: Option<RunRecord>,
    pretrained: Option<ModelParameters>,
) -> Result<PipelineRecord> {
    let stage_two = train_stage_two(&mut params, &data.stage_two_train, Some(&data.validation), &config.train)?;
    let pre_macro_f1 = stage_two
        .validation
        .as_ref()
        .map(|r| r.macro_f1)
        .expect("validation set supplied");

    let labels = data.validation.au_matrix()?;
    let scores = au_scores(&params, &data.validation)?;
    let calibration = calibrate_thresholds(&scores, &labels, &config.grid)?;
    let post_report = f1_report(&apply_thresholds(&scores, &calibration.thresholds)?, &labels)?;

    let labels_a = data.validation_a.au_matrix()?;
    let scores_a = au_scores(&params, &data.validation_a)?;
    let split_thresholds = calibrate_thresholds(&scores_a, &labels_a, &config.grid)?.thresholds;
    let labels_b = data.validation_b.au_matrix()?;
    let scores_b = au_scores(&params, &data.validation_b)?;
    let half = ThresholdVector::uniform(0.5, labels_b.cols())?;
    let split_pre = f1_report(&apply_thresholds(&scores_b, &half)?, &labels_b)?.macro_f1;
    let split_post = f1_report(&apply_thresholds(&scores_b, &split_thresholds)?, &labels_b)?.macro_f1;

    Ok(PipelineRecord {
        config: config.clone(),
        crossval,
        stage_one,
        stage_two,
        stage_two_train_samples: data.stage_two_train.len(),
        validation_samples: data.validation.len(),
        calibration,
        pre_macro_f1,
        post_macro_f1: post_report.macro_f1,
        post_report,
        split_thresholds,
        split_pre_macro_f1: split_pre,
        split_post_macro_f1: split_post,
        params,
        pretrained,
    })
}

/// Generate data, cross-validate and pretrain on expressions, transfer the
/// backbone, fine-tune on AUs, then calibrate thresholds.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineRecord> {
    let data = prepare(config)?;
    let init = init_seed(&config.train);
    let crossval = crossval_stage_one(&data.stage_one, &config.model, &config.train, config.folds)?;
    let mut pretrained = init_parameters(&config.model, init)?;
    let stage_one = train_stage_one(&mut pretrained, &data.stage_one, &config.train)?;
    let params = transfer_backbone(&pretrained, &config.model, init)?;
    finish(config, &data, params, Some(crossval), Some(stage_one), Some(pretrained))
}

/// Same data and stage two as [`run_pipeline`], starting from random
/// initialisation instead of a pretrained backbone.
pub fn run_scratch(config: &PipelineConfig) -> Result<PipelineRecord> {
    let data = prepare(config)?;
    let mut params = init_parameters(&config.model, init_seed(&config.train))?;
    params.expr_head = None;
    params.backbone.trainable = !config.model.freeze_backbone_in_stage2;
    finish(config, &data, params, None, None, None)
}
