mod common;

use std::time::Instant;

use autransfer::diffcore::{Tape, Tensor};

#[test]
fn every_op_matches_finite_differences() {
    let start = Instant::now();
    let results = common::gradient_suite();
    let elapsed = start.elapsed();
    for r in &results {
        assert_eq!(r.points, common::POINTS, "{} ran out of valid points", r.name);
        assert!(
            r.max_rel_err < common::TOLERANCE,
            "{}: max relative error {}",
            r.name,
            r.max_rel_err
        );
    }
    assert!(results.len() >= 12);
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
}

#[test]
fn matmul_against_ones_column() {
    let a = Tensor::matrix(3, 2, vec![0.3, -1.2, 2.0, 0.7, -0.4, 1.1]).unwrap();
    let b = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
    let err = common::check_point(&[a, b], &|t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        Some(t.sum(y))
    })
    .unwrap();
    assert!(err < common::TOLERANCE);

    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::matrix(3, 2, vec![0.0; 6]).unwrap());
    let b = tape.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
    let y = tape.matmul(a, b).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(a).unwrap(), &[1.0; 6]);
}

#[test]
fn relu_away_from_zero() {
    let x = Tensor::vector(vec![-1.0, 2.0]).unwrap();
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = tape.relu(v);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(v).unwrap(), &[0.0, 1.0]);
    let err = common::check_point(&[x], &|t, v| {
        let y = t.relu(v[0]);
        Some(t.sum(y))
    })
    .unwrap();
    assert!(err < common::TOLERANCE);
}
