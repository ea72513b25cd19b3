use crate::diffcore::{log_sum_exp, sigmoid_scalar, softplus, Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::BinaryMatrix;

/// Mean categorical cross-entropy of row logits against class indices.
///
/// Evaluated through log-sum-exp so a confident correct class never takes
/// `ln(0)`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let x = tape.value(logits);
    if x.shape().len() != 2 || x.rows() != labels.len() {
        return Err(Error::dim("cross_entropy", x.shape(), &[labels.len()]));
    }
    let (m, c) = (x.rows(), x.cols());
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::contract(format!(
            "class label {bad} out of range for {c} classes"
        )));
    }

    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = x.row(i);
        total += log_sum_exp(row) - row[label];
    }
    let labels = labels.to_vec();
    Ok(tape.record(
        Tensor::scalar(total / m as f64),
        vec![logits],
        Box::new(move |g, ins, _| {
            let x = ins[0];
            let scale = g[0] / m as f64;
            let mut dx = Vec::with_capacity(m * c);
            for (i, &label) in labels.iter().enumerate() {
                let row = x.row(i);
                let lse = log_sum_exp(row);
                for (j, &v) in row.iter().enumerate() {
                    let p = (v - lse).exp();
                    let t = if j == label { 1.0 } else { 0.0 };
                    dx.push(scale * (p - t));
                }
            }
            vec![dx]
        }),
    ))
}

/// Mean per-entry binary cross-entropy on sigmoid outputs.
///
/// Positive entries of column `j` are weighted by `pos_weights[j]` when
/// weights are given; negatives always weigh 1.
pub fn multi_label_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &Tensor,
    pos_weights: Option<&[f64]>,
) -> Result<Var> {
    let x = tape.value(logits);
    if x.shape() != targets.shape() || x.shape().len() != 2 {
        return Err(Error::dim("multi_label_loss", x.shape(), targets.shape()));
    }
    if let Some(bad) = targets.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::contract(format!("AU label {bad} is not binary")));
    }
    let a = x.cols();
    let weights = match pos_weights {
        Some(w) if w.len() != a => return Err(Error::dim("multi_label_loss", &[a], &[w.len()])),
        Some(w) if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) => {
            return Err(Error::contract("positive-class weights must be positive"))
        }
        Some(w) => w.to_vec(),
        None => vec![1.0; a],
    };

    let n = x.len() as f64;
    let total: f64 = x
        .data()
        .iter()
        .zip(targets.data())
        .enumerate()
        .map(|(k, (&z, &y))| {
            if y == 1.0 {
                weights[k % a] * softplus(-z)
            } else {
                softplus(z)
            }
        })
        .sum();

    let y = targets.data().to_vec();
    Ok(tape.record(
        Tensor::scalar(total / n),
        vec![logits],
        Box::new(move |g, ins, _| {
            let scale = g[0] / n;
            let dx = ins[0]
                .data()
                .iter()
                .zip(&y)
                .enumerate()
                .map(|(k, (&z, &y))| {
                    let s = sigmoid_scalar(z);
                    if y == 1.0 {
                        -scale * weights[k % a] * (1.0 - s)
                    } else {
                        scale * s
                    }
                })
                .collect();
            vec![dx]
        }),
    ))
}

/// Per-column ratio of negatives to positives; 1.0 for columns that lack
/// either class.
pub fn compute_pos_weights(labels: &BinaryMatrix) -> Vec<f64> {
    (0..labels.cols())
        .map(|j| {
            let pos = (0..labels.rows()).filter(|&i| labels.get(i, j) == 1).count();
            let neg = labels.rows() - pos;
            if pos == 0 || neg == 0 {
                1.0
            } else {
                neg as f64 / pos as f64
            }
        })
        .collect()
}
