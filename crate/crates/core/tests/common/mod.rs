//! Independent oracles shared by the integration and acceptance targets.

#![allow(dead_code)]

use autransfer::diffcore::{Tape, Tensor, Var};
use autransfer::losses_metrics::{cross_entropy, multi_label_loss, BinaryMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const POINTS: usize = 100;
const KINK: f64 = 1e-3;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn away_from_kink(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| loop {
            let v: f64 = rng.random_range(-2.0..2.0);
            if v.abs() >= KINK {
                break v;
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Fixed random projection `sum(w * y)` so every output entry contributes
/// with a distinct weight.
fn project(tape: &mut Tape, y: Var, w: &[f64]) -> Var {
    let ty = tape.value(y);
    assert_eq!(ty.len(), w.len());
    let value: f64 = ty.data().iter().zip(w).map(|(a, b)| a * b).sum();
    let w = w.to_vec();
    tape.record(
        Tensor::scalar(value),
        vec![y],
        Box::new(move |g, _, _| vec![w.iter().map(|v| v * g[0]).collect()]),
    )
}

/// `build` returns `None` when the sampled point sits too close to a kink.
type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Option<Var> + 'a;

fn eval(inputs: &[Tensor], build: &Build) -> Option<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    build(&mut tape, &vars).map(|l| tape.value(l).item())
}

/// Largest relative error between analytic and central-difference gradients
/// over every entry of every input, or `None` if the point must be resampled.
pub fn check_point(inputs: &[Tensor], build: &Build) -> Option<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap().to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus, build)? - eval(&minus, build)?) / (2.0 * STEP);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Some(worst)
}

pub struct OpCheck {
    pub name: &'static str,
    pub points: usize,
    pub max_rel_err: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.points == POINTS && self.max_rel_err < TOLERANCE
    }
}

fn run_op<F>(name: &'static str, seed: u64, mut sample: F) -> OpCheck
where
    F: FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build<'static>>),
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = 0;
    let mut worst: f64 = 0.0;
    let mut attempts = 0;
    while points < POINTS && attempts < 20 * POINTS {
        attempts += 1;
        let (inputs, build) = sample(&mut rng);
        if let Some(err) = check_point(&inputs, &*build) {
            worst = worst.max(err);
            points += 1;
        }
    }
    OpCheck {
        name,
        points,
        max_rel_err: worst,
    }
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..=4), rng.random_range(1..=5))
}

/// Finite-difference checks of every differentiable operation, both losses
/// and a full two-layer network, `POINTS` random points each.
pub fn gradient_suite() -> Vec<OpCheck> {
    let mut out = Vec::new();

    out.push(run_op("matmul", 1, |rng| {
        let (m, k) = dims(rng);
        let n = rng.random_range(1..=4);
        let w = weights(rng, m * n);
        let inputs = vec![uniform(rng, m, k), uniform(rng, k, n)];
        (inputs, Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            Some(project(t, y, &w))
        }))
    }));

    out.push(run_op("add_bias", 2, |rng| {
        let (m, n) = dims(rng);
        let w = weights(rng, m * n);
        let bias = Tensor::vector(uniform(rng, 1, n).data().to_vec()).unwrap();
        let inputs = vec![uniform(rng, m, n), bias];
        (inputs, Box::new(move |t, v| {
            let y = t.add_bias(v[0], v[1]).unwrap();
            Some(project(t, y, &w))
        }))
    }));

    out.push(run_op("relu", 3, |rng| {
        let (m, n) = dims(rng);
        let w = weights(rng, m * n);
        let inputs = vec![away_from_kink(rng, m, n)];
        (inputs, Box::new(move |t, v| {
            let y = t.relu(v[0]);
            Some(project(t, y, &w))
        }))
    }));

    out.push(run_op("sigmoid", 4, |rng| {
        let (m, n) = dims(rng);
        let w = weights(rng, m * n);
        let inputs = vec![uniform(rng, m, n)];
        (inputs, Box::new(move |t, v| {
            let y = t.sigmoid(v[0]);
            Some(project(t, y, &w))
        }))
    }));

    out.push(run_op("softmax_rows", 5, |rng| {
        let (m, n) = dims(rng);
        let w = weights(rng, m * n);
        let inputs = vec![uniform(rng, m, n)];
        (inputs, Box::new(move |t, v| {
            let y = t.softmax_rows(v[0]).unwrap();
            Some(project(t, y, &w))
        }))
    }));

    out.push(run_op("add", 6, |rng| {
        let (m, n) = dims(rng);
        let w = weights(rng, m * n);
        let inputs = vec![uniform(rng, m, n), uniform(rng, m, n)];
        (inputs, Box::new(move |t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            Some(project(t, y, &w))
        }))
    }));

    out.push(run_op("sum", 7, |rng| {
        let (m, n) = dims(rng);
        let w = weights(rng, 1);
        let inputs = vec![uniform(rng, m, n)];
        (inputs, Box::new(move |t, v| {
            let y = t.sum(v[0]);
            Some(project(t, y, &w))
        }))
    }));

    out.push(run_op("mean", 8, |rng| {
        let (m, n) = dims(rng);
        let w = weights(rng, 1);
        let inputs = vec![uniform(rng, m, n)];
        (inputs, Box::new(move |t, v| {
            let y = t.mean(v[0]);
            Some(project(t, y, &w))
        }))
    }));

    out.push(run_op("cross_entropy", 9, |rng| {
        let m = rng.random_range(1..=5);
        let c = rng.random_range(2..=6);
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
        let inputs = vec![uniform(rng, m, c)];
        (inputs, Box::new(move |t, v| Some(cross_entropy(t, v[0], &labels).unwrap())))
    }));

    out.push(run_op("multi_label_loss", 10, |rng| {
        let (m, a) = dims(rng);
        let targets: Vec<f64> = (0..m * a).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        let targets = Tensor::matrix(m, a, targets).unwrap();
        let inputs = vec![uniform(rng, m, a)];
        (inputs, Box::new(move |t, v| Some(multi_label_loss(t, v[0], &targets, None).unwrap())))
    }));

    out.push(run_op("multi_label_loss_weighted", 11, |rng| {
        let (m, a) = dims(rng);
        let targets: Vec<f64> = (0..m * a).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        let targets = Tensor::matrix(m, a, targets).unwrap();
        let pw: Vec<f64> = (0..a).map(|_| rng.random_range(0.5..3.0)).collect();
        let inputs = vec![uniform(rng, m, a)];
        (inputs, Box::new(move |t, v| {
            Some(multi_label_loss(t, v[0], &targets, Some(&pw)).unwrap())
        }))
    }));

    out.push(run_op("two_layer_network", 12, |rng| {
        let m = rng.random_range(1..=4);
        let (d, h, c) = (5, 6, 3);
        let x = uniform(rng, m, d);
        let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
        // Parameters at Glorot scale; wider draws saturate the loss and leave
        // only gradients below the finite-difference noise floor.
        let glorot = |rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
            Tensor::matrix(fan_in, fan_out, data).unwrap()
        };
        let bias = |rng: &mut ChaCha8Rng, n| Tensor::vector(uniform(rng, 1, n).data().to_vec()).unwrap();
        let inputs = vec![glorot(rng, d, h), bias(rng, h), glorot(rng, h, c), bias(rng, c)];
        (inputs, Box::new(move |t, v| {
            let xv = t.constant(x.clone());
            let z = t.matmul(xv, v[0]).unwrap();
            let pre = t.add_bias(z, v[1]).unwrap();
            if t.value(pre).data().iter().any(|p| p.abs() < KINK) {
                return None;
            }
            let hidden = t.relu(pre);
            let z2 = t.matmul(hidden, v[2]).unwrap();
            let logits = t.add_bias(z2, v[3]).unwrap();
            Some(cross_entropy(t, logits, &labels).unwrap())
        }))
    }));

    out
}

/// Per-column (tp, fp, fn, tn) by direct enumeration.
pub fn recount(pred: &[Vec<u8>], labels: &[Vec<u8>]) -> Vec<[usize; 4]> {
    let cols = labels.first().map_or(0, Vec::len);
    (0..cols)
        .map(|j| {
            let mut c = [0; 4];
            for (p, y) in pred.iter().zip(labels) {
                let idx = match (p[j], y[j]) {
                    (1, 1) => 0,
                    (1, 0) => 1,
                    (0, 1) => 2,
                    _ => 3,
                };
                c[idx] += 1;
            }
            c
        })
        .collect()
}

/// F1 from counts with the 0/0 = 0 convention.
pub fn f1_from_counts(c: [usize; 4]) -> f64 {
    let [tp, fp, fn_, _] = c;
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn random_binary(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Vec<Vec<u8>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| u8::from(rng.random_bool(p))).collect())
        .collect()
}

pub fn matrix(rows: &[Vec<u8>]) -> BinaryMatrix {
    BinaryMatrix::from_rows(rows).unwrap()
}

/// Best threshold per AU by scanning every grid point and recounting;
/// the first (smallest) maximiser wins.
pub fn brute_force_thresholds(scores: &[Vec<f64>], labels: &[Vec<u8>], grid: &[f64]) -> Vec<(f64, f64)> {
    let cols = labels[0].len();
    (0..cols)
        .map(|j| {
            let mut best: Option<(f64, f64)> = None;
            for &t in grid {
                let pred: Vec<Vec<u8>> = scores.iter().map(|r| vec![u8::from(r[j] >= t)]).collect();
                let lab: Vec<Vec<u8>> = labels.iter().map(|r| vec![r[j]]).collect();
                let f1 = f1_from_counts(recount(&pred, &lab)[0]);
                if best.is_none_or(|(_, b)| f1 > b) {
                    best = Some((t, f1));
                }
            }
            best.unwrap()
        })
        .collect()
}
