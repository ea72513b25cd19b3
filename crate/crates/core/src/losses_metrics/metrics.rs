use std::fmt::Write as _;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Row-major 0/1 matrix: one row per sample, one column per AU.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl BinaryMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("binary matrix", &[rows, cols], &[data.len()]));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::contract(format!("label {bad} is not binary")));
        }
        Ok(BinaryMatrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.as_ref().len() != cols {
                return Err(Error::dim("binary matrix", &[cols], &[r.as_ref().len()]));
            }
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn select_rows(&self, indices: &[usize]) -> BinaryMatrix {
        let data = indices.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        BinaryMatrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::matrix(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
    }
}

/// Per-column confusion tally.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Precision, recall and F1 with every 0/0 taken as 0.
    pub fn scores(&self) -> (f64, f64, f64) {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f1)
    }

    pub fn f1(&self) -> f64 {
        self.scores().2
    }

    /// Precision or recall fell back on the 0/0 convention.
    pub fn is_degenerate(&self) -> bool {
        self.tp + self.fp == 0 || self.tp + self.fn_ == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuMetrics {
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: bool,
}

impl From<Confusion> for AuMetrics {
    fn from(confusion: Confusion) -> Self {
        let (precision, recall, f1) = confusion.scores();
        AuMetrics {
            confusion,
            precision,
            recall,
            f1,
            degenerate: confusion.is_degenerate(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Fraction of correctly predicted label entries.
    pub accuracy: f64,
    pub per_au: Vec<AuMetrics>,
    /// Unweighted mean of the per-AU F1 scores.
    pub macro_f1: f64,
}

impl MetricsReport {
    /// Flat `key=value` lines; AU keys use the 1-based column index (`au03_f1`).
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "accuracy={}", self.accuracy);
        let _ = writeln!(out, "macro_f1={}", self.macro_f1);
        for (j, m) in self.per_au.iter().enumerate() {
            let k = format!("au{:02}", j + 1);
            let c = m.confusion;
            let _ = writeln!(out, "{k}_tp={}", c.tp);
            let _ = writeln!(out, "{k}_fp={}", c.fp);
            let _ = writeln!(out, "{k}_fn={}", c.fn_);
            let _ = writeln!(out, "{k}_tn={}", c.tn);
            let _ = writeln!(out, "{k}_precision={}", m.precision);
            let _ = writeln!(out, "{k}_recall={}", m.recall);
            let _ = writeln!(out, "{k}_f1={}", m.f1);
            let _ = writeln!(out, "{k}_degenerate={}", m.degenerate);
        }
        out
    }
}

/// Fraction of positions where `predictions` and `labels` agree.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::dim("accuracy", &[predictions.len()], &[labels.len()]));
    }
    if labels.is_empty() {
        return Err(Error::contract("accuracy of an empty set is undefined"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Index of the largest entry in each row; the first wins ties.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn confusion_counts(pred: &BinaryMatrix, labels: &BinaryMatrix) -> Result<Vec<Confusion>> {
    if pred.rows() != labels.rows() || pred.cols() != labels.cols() {
        return Err(Error::dim(
            "confusion_counts",
            &[pred.rows(), pred.cols()],
            &[labels.rows(), labels.cols()],
        ));
    }
    let mut out = vec![Confusion::default(); labels.cols()];
    for (k, (&p, &y)) in pred.data().iter().zip(labels.data()).enumerate() {
        let c = &mut out[k % labels.cols()];
        match (p, y) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(out)
}

pub fn f1_report(pred: &BinaryMatrix, labels: &BinaryMatrix) -> Result<MetricsReport> {
    let counts = confusion_counts(pred, labels)?;
    let per_au: Vec<AuMetrics> = counts.into_iter().map(AuMetrics::from).collect();
    let cells = labels.rows() * labels.cols();
    let correct: usize = per_au.iter().map(|m| m.confusion.tp + m.confusion.tn).sum();
    let accuracy = if cells == 0 { 0.0 } else { correct as f64 / cells as f64 };
    let macro_f1 = if per_au.is_empty() {
        0.0
    } else {
        per_au.iter().map(|m| m.f1).sum::<f64>() / per_au.len() as f64
    };
    Ok(MetricsReport {
        accuracy,
        per_au,
        macro_f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[u8]) -> BinaryMatrix {
        BinaryMatrix::new(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2, 0], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 1, 2, 3], &[1, 1, 2, 0]).unwrap(), 0.75);
        assert!(matches!(accuracy(&[], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn confusion_cases() {
        let y = BinaryMatrix::from_rows(&[vec![1, 0], vec![0, 1], vec![1, 1]]).unwrap();
        let same = confusion_counts(&y, &y).unwrap();
        assert!(same.iter().all(|c| c.fp == 0 && c.fn_ == 0));
        let flipped = BinaryMatrix::new(3, 2, y.data().iter().map(|v| 1 - v).collect()).unwrap();
        let inv = confusion_counts(&flipped, &y).unwrap();
        assert!(inv.iter().all(|c| c.tp == 0 && c.tn == 0));

        let c = confusion_counts(&col(&[1, 1, 0, 0]), &col(&[1, 0, 1, 0])).unwrap();
        assert_eq!(c[0], Confusion { tp: 1, fp: 1, fn_: 1, tn: 1 });

        let wide = BinaryMatrix::new(4, 2, vec![0; 8]).unwrap();
        assert!(matches!(
            confusion_counts(&wide, &col(&[0; 4])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn f1_cases() {
        let y = BinaryMatrix::from_rows(&[vec![1, 0, 1], vec![0, 1, 1]]).unwrap();
        let r = f1_report(&y, &y).unwrap();
        assert_eq!(r.macro_f1, 1.0);
        assert_eq!(r.accuracy, 1.0);

        let r = f1_report(&col(&[0, 0, 0]), &col(&[0, 0, 0])).unwrap();
        assert_eq!(r.per_au[0].f1, 0.0);
        assert!(r.per_au[0].degenerate);

        // tp=2, fp=1, fn=1
        let r = f1_report(&col(&[1, 1, 1, 0, 0]), &col(&[1, 1, 0, 1, 0])).unwrap();
        let m = r.per_au[0];
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(!m.degenerate);
    }

    #[test]
    fn report_kv_keys() {
        let y = BinaryMatrix::from_rows(&[vec![1, 0, 1]]).unwrap();
        let kv = f1_report(&y, &y).unwrap().to_kv();
        assert!(kv.starts_with("accuracy=1\nmacro_f1=0.6666666666666666\n"), "{kv}");
        assert!(kv.contains("au03_f1=1\n"));
        assert!(kv.contains("au02_degenerate=true\n"));
    }

    #[test]
    fn argmax_first_wins_ties() {
        let t = Tensor::matrix(2, 3, vec![1.0, 3.0, 3.0, -1.0, -2.0, -3.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0]);
    }

    #[test]
    fn binary_matrix_rejects_non_binary() {
        assert!(BinaryMatrix::new(1, 2, vec![0, 2]).is_err());
    }
}
