//! Plain-text parameter checkpoints.
//!
//! ```text
//! AUTRANSFER-CKPT v1
//! [block backbone.0.weight 64 128]
//! <row 0 values, space separated>
//! ...
//! [block backbone.0.bias 1 128]
//! ...
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a save/load
//! cycle is exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{Block, Linear, ModelConfig, ModelParameters};

pub const CHECKPOINT_HEADER: &str = "AUTRANSFER-CKPT v1";

pub fn format_checkpoint(params: &ModelParameters) -> String {
    let mut out = format!("{CHECKPOINT_HEADER}\n");
    for (name, block) in params.blocks() {
        for (i, layer) in block.layers.iter().enumerate() {
            for (kind, t) in [("weight", &layer.weight), ("bias", &layer.bias)] {
                let (rows, cols) = (t.len() / t.cols(), t.cols());
                let _ = writeln!(out, "[block {name}.{i}.{kind} {rows} {cols}]");
                for r in 0..rows {
                    let row = &t.data()[r * cols..(r + 1) * cols];
                    for (j, v) in row.iter().enumerate() {
                        if j > 0 {
                            out.push(' ');
                        }
                        let _ = write!(out, "{v}");
                    }
                    out.push('\n');
                }
            }
        }
    }
    out
}

struct Section {
    block: String,
    layer: usize,
    kind: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

fn parse_sections(text: &str) -> Result<Vec<Section>> {
    let err = |line: usize, msg: &str| Error::Checkpoint(format!("line {line}: {msg}"));
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, CHECKPOINT_HEADER)) => {}
        _ => return Err(err(1, &format!("expected header `{CHECKPOINT_HEADER}`"))),
    }
    let mut sections: Vec<Section> = Vec::new();
    for (no, line) in lines {
        if line.is_empty() {
            continue;
        }
        if let Some(inner) = line.strip_prefix("[block ").and_then(|l| l.strip_suffix(']')) {
            let parts: Vec<&str> = inner.split_whitespace().collect();
            let [name, rows, cols] = parts[..] else {
                return Err(err(no, "malformed block header"));
            };
            let mut name_parts = name.split('.');
            let (Some(block), Some(layer), Some(kind), None) = (
                name_parts.next(),
                name_parts.next().and_then(|l| l.parse().ok()),
                name_parts.next(),
                name_parts.next(),
            ) else {
                return Err(err(no, &format!("bad block name `{name}`")));
            };
            let (Ok(rows), Ok(cols)) = (rows.parse::<usize>(), cols.parse::<usize>()) else {
                return Err(err(no, "bad block dimensions"));
            };
            if rows == 0 || cols == 0 {
                return Err(err(no, "block dimensions must be positive"));
            }
            sections.push(Section {
                block: block.to_string(),
                layer,
                kind: kind.to_string(),
                rows,
                cols,
                values: Vec::with_capacity(rows * cols),
            });
        } else {
            let section = sections
                .last_mut()
                .ok_or_else(|| err(no, "values before any block header"))?;
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| err(no, &format!("bad value `{tok}`")))?;
                section.values.push(v);
            }
            if section.values.len() > section.rows * section.cols {
                return Err(err(no, "too many values for block"));
            }
        }
    }
    Ok(sections)
}

fn assemble(sections: Vec<Section>) -> Result<ModelParameters> {
    let mut blocks: Vec<(String, Vec<Linear>)> = Vec::new();
    let mut pending_weight: Option<Tensor> = None;
    for s in sections {
        let name = format!("{}.{}.{}", s.block, s.layer, s.kind);
        if s.values.len() != s.rows * s.cols {
            return Err(Error::Checkpoint(format!("block {name} is truncated")));
        }
        if blocks.last().is_none_or(|(b, _)| *b != s.block) {
            if pending_weight.is_some() {
                return Err(Error::Checkpoint(format!("weight without bias before {name}")));
            }
            if blocks.iter().any(|(b, _)| *b == s.block) {
                return Err(Error::Checkpoint(format!("block {} appears twice", s.block)));
            }
            blocks.push((s.block.clone(), Vec::new()));
        }
        let layers = &mut blocks.last_mut().expect("pushed above").1;
        if s.layer != layers.len() {
            return Err(Error::Checkpoint(format!("unexpected layer index in {name}")));
        }
        match (s.kind.as_str(), pending_weight.take()) {
            ("weight", None) => pending_weight = Some(Tensor::matrix(s.rows, s.cols, s.values)?),
            ("bias", Some(weight)) => {
                if s.rows != 1 || s.cols != weight.cols() {
                    return Err(Error::Checkpoint(format!("bias shape mismatch in {name}")));
                }
                if let Some(prev) = layers.last() {
                    if prev.fan_out() != weight.rows() {
                        return Err(Error::Checkpoint(format!("layer chain broken at {name}")));
                    }
                }
                layers.push(Linear {
                    weight,
                    bias: Tensor::vector(s.values)?,
                });
            }
            _ => return Err(Error::Checkpoint(format!("unexpected section {name}"))),
        }
    }
    if pending_weight.is_some() {
        return Err(Error::Checkpoint("trailing weight without bias".into()));
    }

    let mut backbone = None;
    let mut expr_head = None;
    let mut au_head = None;
    for (name, layers) in blocks {
        let block = Block {
            layers,
            trainable: true,
        };
        match name.as_str() {
            "backbone" => backbone = Some(block),
            "expr" if block.layers.len() == 1 => expr_head = Some(block),
            "au" if block.layers.len() == 3 => au_head = Some(block),
            other => {
                return Err(Error::Checkpoint(format!(
                    "unexpected block `{other}` with {} layers",
                    block.layers.len()
                )))
            }
        }
    }
    let backbone = backbone.ok_or_else(|| Error::Checkpoint("missing backbone".into()))?;
    let feat = backbone.layers.last().map_or(0, Linear::fan_out);
    for head in expr_head.iter().chain(au_head.iter()) {
        if head.layers[0].fan_in() != feat {
            return Err(Error::Checkpoint(format!(
                "head input width {} does not match feature width {feat}",
                head.layers[0].fan_in()
            )));
        }
    }
    Ok(ModelParameters {
        backbone,
        expr_head,
        au_head,
    })
}

pub fn parse_checkpoint(text: &str) -> Result<ModelParameters> {
    assemble(parse_sections(text)?)
}

pub fn save_checkpoint(params: &ModelParameters, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParameters> {
    parse_checkpoint(&fs::read_to_string(path)?)
}

/// Loads a checkpoint and rejects it unless every block matches `config`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, config: &ModelConfig) -> Result<ModelParameters> {
    let params = load_checkpoint(path)?;
    params
        .check_config(config)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(params)
}
