//! Per-AU decision thresholds chosen to maximise F1 on held-out scores.
//!
//! Macro-F1 is the mean of per-AU F1 scores, so searching each AU on its own
//! maximises the macro score as well. The grid must contain 0.5, which makes
//! the calibrated macro-F1 never worse than plain 0.5 binarisation on the
//! calibration set.

use std::fmt;
use std::str::FromStr;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::losses_metrics::{BinaryMatrix, Confusion};

/// One threshold per AU, each in the open interval (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdVector(Vec<f64>);

impl ThresholdVector {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::contract("threshold vector is empty"));
        }
        if let Some(bad) = thresholds.iter().find(|&&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::contract(format!("threshold {bad} outside (0, 1)")));
        }
        Ok(ThresholdVector(thresholds))
    }

    pub fn uniform(value: f64, len: usize) -> Result<Self> {
        Self::new(vec![value; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for ThresholdVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl FromStr for ThresholdVector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let line = s.trim();
        let values = line
            .split(',')
            .map(|v| {
                v.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: 1,
                    msg: format!("bad threshold `{}`", v.trim()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(values)
    }
}

/// 0.05, 0.10, ..., 0.95.
pub fn default_grid() -> Vec<f64> {
    (1..20).map(|i| i as f64 / 20.0).collect()
}

/// Checks that `grid` is non-empty, strictly ascending, inside (0, 1) and contains 0.5.
pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::contract("threshold grid is empty"));
    }
    if grid.iter().any(|&g| !(g > 0.0 && g < 1.0)) {
        return Err(Error::contract("grid values must lie in (0, 1)"));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract("grid must be strictly ascending"));
    }
    if !grid.contains(&0.5) {
        return Err(Error::contract("grid must contain 0.5"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub thresholds: ThresholdVector,
    /// Best F1 reached by each AU on the calibration data.
    pub f1: Vec<f64>,
    /// The chosen threshold relies on the 0/0 convention (e.g. no positives).
    pub degenerate: Vec<bool>,
}

fn tally(scores: &Tensor, labels: &BinaryMatrix, au: usize, threshold: f64) -> Confusion {
    let mut c = Confusion::default();
    for i in 0..labels.rows() {
        let pred = scores.get(i, au) >= threshold;
        match (pred, labels.get(i, au) == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

fn check_scores(scores: &Tensor, rows: usize, cols: usize) -> Result<()> {
    if scores.shape() != [rows, cols] {
        return Err(Error::dim("calibration", scores.shape(), &[rows, cols]));
    }
    if scores.data().iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::contract("scores must lie in [0, 1]"));
    }
    Ok(())
}

/// Exhaustive per-AU grid search; ties go to the smallest threshold.
pub fn calibrate_thresholds(
    scores: &Tensor,
    labels: &BinaryMatrix,
    grid: &[f64],
) -> Result<Calibration> {
    validate_grid(grid)?;
    if labels.rows() == 0 || labels.cols() == 0 {
        return Err(Error::contract("calibration needs at least one sample"));
    }
    check_scores(scores, labels.rows(), labels.cols())?;

    let mut thresholds = Vec::with_capacity(labels.cols());
    let mut f1 = Vec::with_capacity(labels.cols());
    let mut degenerate = Vec::with_capacity(labels.cols());
    for au in 0..labels.cols() {
        let mut best = (grid[0], tally(scores, labels, au, grid[0]));
        for &t in &grid[1..] {
            let c = tally(scores, labels, au, t);
            if c.f1() > best.1.f1() {
                best = (t, c);
            }
        }
        thresholds.push(best.0);
        f1.push(best.1.f1());
        degenerate.push(best.1.is_degenerate());
    }
    Ok(Calibration {
        thresholds: ThresholdVector::new(thresholds)?,
        f1,
        degenerate,
    })
}

/// Binarises scores: 1 where `score >= threshold`.
pub fn apply_thresholds(scores: &Tensor, tv: &ThresholdVector) -> Result<BinaryMatrix> {
    if scores.shape().len() != 2 || scores.cols() != tv.len() {
        return Err(Error::dim("apply_thresholds", scores.shape(), &[tv.len()]));
    }
    let cols = tv.len();
    let data = scores
        .data()
        .iter()
        .enumerate()
        .map(|(k, &s)| u8::from(s >= tv.as_slice()[k % cols]))
        .collect();
    BinaryMatrix::new(scores.rows(), cols, data)
}
