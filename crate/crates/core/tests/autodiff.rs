//! Finite-difference checks for every differentiable tape operation.

mod common;

use common::*;
use refinedial::tensor::{Tape, Tensor};

const SEEDS: u64 = 20;

#[test]
fn every_op_matches_finite_differences() {
    let cases = op_cases();
    for case in &cases {
        let err = worst_op_error(case, SEEDS);
        assert!(err < FD_TOLERANCE, "{}: max rel err {err:e}", case.name);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut r = rng(7);
        let x = random_tensor(&mut r, &[3, 4]).with_requires_grad(true);
        let w = random_tensor(&mut r, &[4, 4]).with_requires_grad(true);
        let mut t = Tape::new();
        let (xv, wv) = (t.leaf(&x), t.leaf(&w));
        let h = t.matmul(xv, wv).unwrap();
        let a = t.softmax(h, 1).unwrap();
        let l = t.cross_entropy(a, &[0, 1, 2], None).unwrap();
        t.backward(l).unwrap();
        (t.scalar(l).to_bits(), t.grad(wv).unwrap().iter().map(|g| g.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            rows in 1usize..5,
            data in proptest::collection::vec(-50.0f64..50.0, 1..40),
        ) {
            let cols = (data.len() / rows).max(1);
            let n = rows.min(data.len()) * cols;
            let rows = n / cols;
            prop_assume!(rows >= 1);
            let x = Tensor::new(vec![rows, cols], data[..n].to_vec()).unwrap();
            let mut t = Tape::new();
            let v = t.constant(&x);
            let y = t.softmax(v, 1).unwrap();
            for row in t.value(y).chunks(cols) {
                let s: f64 = row.iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }
}
