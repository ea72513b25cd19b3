use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use autransfer::calibration::{
    apply_thresholds, calibrate_thresholds, default_grid, validate_grid, ThresholdVector,
};
use autransfer::data::{generate_synthetic, read_dataset, write_dataset, Dataset, GenConfig};
use autransfer::diffcore::Tensor;
use autransfer::losses_metrics::f1_report;
use autransfer::model::{init_parameters, transfer_backbone, ModelConfig, ModelParameters};
use autransfer::seeds::{self, stream};
use autransfer::training::{
    au_scores, crossval_stage_one, evaluate_au, expression_accuracy, load_checkpoint,
    run_pipeline, run_scratch, save_checkpoint, train_stage_one, train_stage_two,
    PipelineConfig, TrainConfig,
};
use autransfer::Error;

use crate::settings::{List, Settings};
use crate::{
    CalibrateArgs, CliError, CrossvalArgs, EvaluateArgs, FinetuneArgs, GenDataArgs, PipelineArgs,
    PretrainArgs, TrainFlags,
};

type CliResult<T> = Result<T, CliError>;

fn at(path: &Path, e: Error) -> CliError {
    let mut err = CliError::from(e);
    err.msg = format!("{}: {}", path.display(), err.msg);
    err
}

fn usage(e: Error) -> CliError {
    CliError::usage(e.to_string())
}

fn load_data(path: &str) -> CliResult<Dataset> {
    let p = Path::new(path);
    read_dataset(p).map_err(|e| at(p, e))
}

fn load_params(path: &str) -> CliResult<ModelParameters> {
    let p = Path::new(path);
    load_checkpoint(p).map_err(|e| at(p, e))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn out_dir(path: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(path).map_err(|e| CliError::io(format!("{path}: {e}")))?;
    Ok(PathBuf::from(path))
}

fn save_params(params: &ModelParameters, path: &Path) -> CliResult<()> {
    save_checkpoint(params, path).map_err(|e| at(path, e))
}

/// Appends `.manifest` to a file path.
fn sidecar(path: &str) -> PathBuf {
    PathBuf::from(format!("{path}.manifest"))
}

fn train_config(s: &mut Settings, f: &TrainFlags, seed: u64) -> CliResult<TrainConfig> {
    let d = TrainConfig::default();
    let epochs = s.value("epochs", f.epochs, d.epochs_stage1)?;
    let config = TrainConfig {
        epochs_stage1: epochs,
        epochs_stage2: epochs,
        batch_size: s.value("batch-size", f.batch_size, d.batch_size)?,
        learning_rate: s.value("lr", f.lr, d.learning_rate)?,
        momentum: s.value("momentum", f.momentum, d.momentum)?,
        seed,
        shuffle: !s.switch("no-shuffle", f.no_shuffle)?,
        pos_weighting: false,
    };
    config.validate().map_err(usage)?;
    Ok(config)
}

fn all_au_labelled(ds: &Dataset) -> bool {
    !ds.is_empty() && ds.samples.iter().all(|s| s.au_labels.is_some())
}

fn all_expression_labelled(ds: &Dataset) -> bool {
    !ds.is_empty() && ds.samples.iter().all(|s| s.expression.is_some())
}

fn scores_csv(scores: &Tensor) -> String {
    let mut out = String::new();
    for i in 0..scores.rows() {
        let row: Vec<String> = scores.row(i).iter().map(ToString::to_string).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn parse_scores(path: &Path, text: &str) -> CliResult<Tensor> {
    let bad = |line: usize, msg: String| CliError::format(format!("{}:{line}: {msg}", path.display()));
    let mut cols = 0;
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad(i + 1, format!("bad score `{v}`"))))
            .collect::<CliResult<Vec<_>>>()?;
        if rows == 0 {
            cols = row.len();
        } else if row.len() != cols {
            return Err(bad(i + 1, format!("expected {cols} scores, found {}", row.len())));
        }
        data.extend(row);
        rows += 1;
    }
    if rows == 0 {
        return Err(bad(1, "no scores".into()));
    }
    Tensor::matrix(rows, cols, data).map_err(|e| at(path, e))
}

pub fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let mut s = Settings::load(a.common.config.as_deref(), "gen-data")?;
    let output: String = s.required("output", a.output)?;
    let d = GenConfig::default();
    let config = GenConfig {
        seed: s.value("seed", a.common.seed, d.seed)?,
        num_subjects: s.value("subjects", a.subjects, d.num_subjects)?,
        samples_per_subject: s.value("per-subject", a.per_subject, d.samples_per_subject)?,
        input_dim: s.value("input-dim", a.input_dim, d.input_dim)?,
        num_expressions: s.value("num-expressions", a.num_expressions, d.num_expressions)?,
        num_aus: s.value("num-aus", a.num_aus, d.num_aus)?,
        noise_sigma: s.value("noise-sigma", a.noise_sigma, d.noise_sigma)?,
        subject_offset_sigma: s.value(
            "subject-offset-sigma",
            a.subject_offset_sigma,
            d.subject_offset_sigma,
        )?,
        au_flip_prob: s.value("au-flip-prob", a.au_flip_prob, d.au_flip_prob)?,
        imbalance_skew: s.value("imbalance-skew", a.imbalance_skew, d.imbalance_skew)?,
    };
    s.finish()?;
    config.validate().map_err(usage)?;

    let ds = generate_synthetic(&config)?;
    let path = Path::new(&output);
    write_dataset(&ds, path).map_err(|e| at(path, e))?;
    s.write_manifest("gen-data", &sidecar(&output))?;

    let labels = ds.au_matrix()?;
    let mut summary = format!("samples={}\nsubjects={}\n", ds.len(), ds.subjects().len());
    for j in 0..labels.cols() {
        let pos = (0..labels.rows()).filter(|&i| labels.get(i, j) == 1).count();
        let _ = writeln!(summary, "au{:02}_rate={}", j + 1, pos as f64 / labels.rows() as f64);
    }
    print!("{summary}");
    Ok(())
}

pub fn pretrain(a: PretrainArgs) -> CliResult<()> {
    let mut s = Settings::load(a.common.config.as_deref(), "pretrain")?;
    let data: String = s.required("data", a.data)?;
    let output: String = s.required("output", a.output)?;
    let seed = s.value("seed", a.common.seed, 0u64)?;
    let train = train_config(&mut s, &a.train, seed)?;
    let defaults = ModelConfig::default();
    let backbone = s.value("backbone", a.backbone, List(defaults.backbone_layers.clone()))?;
    let num_expressions = s.value("num-expressions", a.num_expressions, defaults.num_expressions)?;
    s.finish()?;

    let ds = load_data(&data)?;
    let model = ModelConfig {
        input_dim: ds.input_dim,
        backbone_layers: backbone.0,
        num_expressions,
        num_aus: ds.num_aus,
        ..defaults
    };
    model.validate().map_err(usage)?;

    let mut params = init_parameters(&model, seeds::derive(seed, stream::INIT))?;
    params.au_head = None;
    let run = train_stage_one(&mut params, &ds, &train)?;

    let dir = out_dir(&output)?;
    save_params(&params, &dir.join("pretrained.ckpt"))?;
    write(&dir.join("loss.csv"), &run.loss_csv())?;
    let report = run.to_kv("stage1.");
    write(&dir.join("report.txt"), &report)?;
    s.write_manifest("pretrain", &dir.join("manifest.txt"))?;
    print!("{report}");
    Ok(())
}

pub fn finetune(a: FinetuneArgs) -> CliResult<()> {
    let mut s = Settings::load(a.common.config.as_deref(), "finetune")?;
    let data: String = s.required("data", a.data)?;
    let val_data: Option<String> = s.optional("val-data", a.val_data)?;
    let checkpoint: String = s.required("checkpoint", a.checkpoint)?;
    let output: String = s.required("output", a.output)?;
    let seed = s.value("seed", a.common.seed, 0u64)?;
    let mut train = train_config(&mut s, &a.train, seed)?;
    let defaults = ModelConfig::default();
    let au_hidden = s.value("au-hidden", a.au_hidden, List(defaults.au_head_hidden.clone()))?;
    let freeze = s.switch("freeze-backbone", a.freeze_backbone)?;
    train.pos_weighting = s.switch("pos-weighting", a.pos_weighting)?;
    s.finish()?;

    let ds = load_data(&data)?;
    let val = val_data.as_deref().map(load_data).transpose()?;
    let pretrained = load_params(&checkpoint)?;
    for (name, set) in std::iter::once(("data", &ds)).chain(val.iter().map(|v| ("val-data", v))) {
        if set.input_dim != pretrained.input_dim() {
            return Err(CliError::format(format!(
                "{name} has {} features per sample but the checkpoint expects {}",
                set.input_dim,
                pretrained.input_dim()
            )));
        }
        if set.num_aus != ds.num_aus {
            return Err(CliError::format(format!(
                "{name} has {} AUs, training data has {}",
                set.num_aus, ds.num_aus
            )));
        }
    }
    let model = ModelConfig {
        input_dim: pretrained.input_dim(),
        backbone_layers: pretrained.backbone.layers.iter().map(|l| l.fan_out()).collect(),
        num_expressions: pretrained.num_expressions().unwrap_or(defaults.num_expressions),
        num_aus: ds.num_aus,
        au_head_hidden: au_hidden.0,
        freeze_backbone_in_stage2: freeze,
    };
    model.validate().map_err(usage)?;

    let mut params = transfer_backbone(&pretrained, &model, seeds::derive(seed, stream::INIT))?;
    let run = train_stage_two(&mut params, &ds, val.as_ref(), &train)?;

    let dir = out_dir(&output)?;
    save_params(&params, &dir.join("finetuned.ckpt"))?;
    write(&dir.join("loss.csv"), &run.loss_csv())?;
    let report = run.to_kv("stage2.");
    write(&dir.join("report.txt"), &report)?;
    s.write_manifest("finetune", &dir.join("manifest.txt"))?;
    print!("{report}");
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let mut s = Settings::load(a.config.as_deref(), "evaluate")?;
    let data: String = s.required("data", a.data)?;
    let checkpoint: String = s.required("checkpoint", a.checkpoint)?;
    let thresholds: Option<String> = s.optional("thresholds", a.thresholds)?;
    let output: String = s.required("output", a.output)?;
    s.finish()?;

    let ds = load_data(&data)?;
    let params = load_params(&checkpoint)?;
    if ds.input_dim != params.input_dim() {
        return Err(CliError::format(format!(
            "{data} has {} features per sample but the checkpoint expects {}",
            ds.input_dim,
            params.input_dim()
        )));
    }
    let tv = match &thresholds {
        Some(path) => {
            let p = Path::new(path);
            let text = fs::read_to_string(p).map_err(|e| at(p, e.into()))?;
            Some(text.parse::<ThresholdVector>().map_err(|e| at(p, e))?)
        }
        None => None,
    };

    let dir = out_dir(&output)?;
    let mut report = format!("samples={}\n", ds.len());
    let mut evaluated = false;
    if params.expr_head.is_some() && all_expression_labelled(&ds) {
        let _ = writeln!(report, "expression_accuracy={}", expression_accuracy(&params, &ds)?);
        evaluated = true;
    }
    if let Some(aus) = params.num_aus() {
        if aus != ds.num_aus {
            return Err(CliError::format(format!(
                "{data} has {} AUs but the checkpoint predicts {aus}",
                ds.num_aus
            )));
        }
        if let Some(tv) = &tv {
            if tv.len() != aus {
                return Err(CliError::format(format!(
                    "{} thresholds given for {aus} AUs",
                    tv.len()
                )));
            }
        }
        write(&dir.join("scores.csv"), &scores_csv(&au_scores(&params, &ds)?))?;
        if all_au_labelled(&ds) {
            let half = ThresholdVector::uniform(0.5, aus)?;
            let used = tv.as_ref().unwrap_or(&half);
            let _ = writeln!(report, "thresholds={used}");
            report.push_str(&evaluate_au(&params, &ds, Some(used))?.to_kv());
        }
        evaluated = true;
    }
    if !evaluated {
        return Err(CliError::format(
            "checkpoint has no head that can be evaluated on this dataset",
        ));
    }
    write(&dir.join("report.txt"), &report)?;
    s.write_manifest("evaluate", &dir.join("manifest.txt"))?;
    print!("{report}");
    Ok(())
}

pub fn calibrate(a: CalibrateArgs) -> CliResult<()> {
    let mut s = Settings::load(a.config.as_deref(), "calibrate")?;
    let scores_path: String = s.required("scores", a.scores)?;
    let data: String = s.required("data", a.data)?;
    let output: String = s.required("output", a.output)?;
    let grid = s.value("grid", a.grid, List(default_grid()))?;
    s.finish()?;
    validate_grid(&grid.0).map_err(usage)?;

    let p = Path::new(&scores_path);
    let text = fs::read_to_string(p).map_err(|e| at(p, e.into()))?;
    let scores = parse_scores(p, &text)?;
    let ds = load_data(&data)?;
    let labels = ds.au_matrix().map_err(|e| at(Path::new(&data), e))?;
    let cal = calibrate_thresholds(&scores, &labels, &grid.0)?;
    let pre = f1_report(
        &apply_thresholds(&scores, &ThresholdVector::uniform(0.5, labels.cols())?)?,
        &labels,
    )?;
    let post = f1_report(&apply_thresholds(&scores, &cal.thresholds)?, &labels)?;

    write(Path::new(&output), &format!("{}\n", cal.thresholds))?;
    s.write_manifest("calibrate", &sidecar(&output))?;

    let mut summary = String::new();
    for (j, t) in cal.thresholds.as_slice().iter().enumerate() {
        let k = format!("au{:02}", j + 1);
        let _ = writeln!(summary, "{k}_threshold={t}");
        let _ = writeln!(summary, "{k}_f1={}", cal.f1[j]);
        let _ = writeln!(summary, "{k}_degenerate={}", cal.degenerate[j]);
    }
    let _ = writeln!(summary, "pre_calibration_macro_f1={}", pre.macro_f1);
    let _ = writeln!(summary, "post_calibration_macro_f1={}", post.macro_f1);
    print!("{summary}");
    Ok(())
}

pub fn crossval(a: CrossvalArgs) -> CliResult<()> {
    let mut s = Settings::load(a.common.config.as_deref(), "crossval")?;
    let data: String = s.required("data", a.data)?;
    let output: Option<String> = s.optional("output", a.output)?;
    let seed = s.value("seed", a.common.seed, 0u64)?;
    let k = s.value("k", a.k, 5usize)?;
    let train = train_config(&mut s, &a.train, seed)?;
    let defaults = ModelConfig::default();
    let backbone = s.value("backbone", a.backbone, List(defaults.backbone_layers.clone()))?;
    let num_expressions = s.value("num-expressions", a.num_expressions, defaults.num_expressions)?;
    s.finish()?;
    if k < 2 {
        return Err(CliError::usage("--k must be at least 2"));
    }

    let ds = load_data(&data)?;
    let model = ModelConfig {
        input_dim: ds.input_dim,
        backbone_layers: backbone.0,
        num_expressions,
        num_aus: ds.num_aus,
        ..defaults
    };
    model.validate().map_err(usage)?;

    let cv = crossval_stage_one(&ds, &model, &train, k)?;
    let mut report = String::new();
    for (i, fold) in cv.folds.iter().enumerate() {
        let ids: Vec<String> = fold.iter().map(ToString::to_string).collect();
        let _ = writeln!(report, "fold{}_subjects={}", i + 1, ids.join(","));
    }
    report.push_str(&cv.to_kv());
    if let Some(output) = output {
        let dir = out_dir(&output)?;
        write(&dir.join("report.txt"), &report)?;
        s.write_manifest("crossval", &dir.join("manifest.txt"))?;
    }
    print!("{report}");
    Ok(())
}

pub fn pipeline(a: PipelineArgs) -> CliResult<()> {
    let mut s = Settings::load(a.common.config.as_deref(), "pipeline")?;
    let output: String = s.required("output", a.output)?;
    let seed = s.value("seed", a.common.seed, 0u64)?;
    let mut c = PipelineConfig::default().with_seed(seed);
    c.gen.num_subjects = s.value("subjects", a.subjects, c.gen.num_subjects)?;
    c.gen.samples_per_subject = s.value("per-subject", a.per_subject, c.gen.samples_per_subject)?;
    c.gen.noise_sigma = s.value("noise-sigma", a.noise_sigma, c.gen.noise_sigma)?;
    c.gen.au_flip_prob = s.value("au-flip-prob", a.au_flip_prob, c.gen.au_flip_prob)?;
    c.train.epochs_stage1 = s.value("epochs-stage1", a.epochs_stage1, c.train.epochs_stage1)?;
    c.train.epochs_stage2 = s.value("epochs-stage2", a.epochs_stage2, c.train.epochs_stage2)?;
    c.train.batch_size = s.value("batch-size", a.batch_size, c.train.batch_size)?;
    c.train.learning_rate = s.value("lr", a.lr, c.train.learning_rate)?;
    c.train.momentum = s.value("momentum", a.momentum, c.train.momentum)?;
    c.folds = s.value("folds", a.folds, c.folds)?;
    c.au_label_fraction = s.value("au-label-fraction", a.au_label_fraction, c.au_label_fraction)?;
    c.model.backbone_layers =
        s.value("backbone", a.backbone, List(c.model.backbone_layers.clone()))?.0;
    c.model.au_head_hidden =
        s.value("au-hidden", a.au_hidden, List(c.model.au_head_hidden.clone()))?.0;
    c.grid = s.value("grid", a.grid, List(c.grid.clone()))?.0;
    c.model.freeze_backbone_in_stage2 = s.switch("freeze-backbone", a.freeze_backbone)?;
    c.train.pos_weighting = s.switch("pos-weighting", a.pos_weighting)?;
    let scratch = s.switch("scratch", a.scratch)?;
    s.finish()?;
    c.validate().map_err(usage)?;
    validate_grid(&c.grid).map_err(usage)?;
    if c.folds < 2 {
        return Err(CliError::usage("--folds must be at least 2"));
    }

    let record = if scratch { run_scratch(&c)? } else { run_pipeline(&c)? };

    let dir = out_dir(&output)?;
    let report = record.to_kv();
    write(&dir.join("report.txt"), &report)?;
    if let Some(r) = &record.stage_one {
        write(&dir.join("loss_stage1.csv"), &r.loss_csv())?;
    }
    write(&dir.join("loss_stage2.csv"), &record.stage_two.loss_csv())?;
    if let Some(p) = &record.pretrained {
        save_params(p, &dir.join("pretrained.ckpt"))?;
    }
    save_params(&record.params, &dir.join("finetuned.ckpt"))?;
    write(&dir.join("thresholds.txt"), &format!("{}\n", record.calibration.thresholds))?;
    s.write_manifest("pipeline", &dir.join("manifest.txt"))?;
    print!("{report}");
    Ok(())
}
