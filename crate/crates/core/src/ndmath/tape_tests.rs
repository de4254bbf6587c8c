use super::{Tape, Tensor};
use crate::error::Error;
use crate::rng::rng_from_seed;
use crate::testutil::{assert_grad_close, finite_diff};
use proptest::prelude::*;

fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::from_vec(rows, cols, data.to_vec()).unwrap()
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let eye = tape.leaf(t(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let a = tape.leaf(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    let c = tape.matmul(eye, a).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_dot_product() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(1, 2, &[1.0, 2.0]));
    let b = tape.leaf(t(2, 1, &[3.0, 4.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(2, 3, &[0.0; 6]));
    let b = tape.leaf(t(2, 2, &[0.0; 4]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("2x3") && msg.contains("2x2"), "got: {msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = rng_from_seed(11);
    let a0 = Tensor::uniform(3, 4, -1.0, 1.0, &mut rng);
    let b0 = Tensor::uniform(4, 2, -1.0, 1.0, &mut rng);

    let mut tape = Tape::new();
    let a = tape.leaf(a0.clone().with_grad());
    let b = tape.leaf(b0.clone().with_grad());
    let c = tape.matmul(a, b).unwrap();
    let loss = tape.sum(c).unwrap();
    tape.backward(loss).unwrap();

    let f_a = |x: &[f64]| {
        let mut tp = Tape::new();
        let a = tp.leaf(t(3, 4, x));
        let b = tp.leaf(b0.clone());
        let c = tp.matmul(a, b).unwrap();
        let s = tp.sum(c).unwrap();
        tp.value(s).data()[0]
    };
    let numeric = finite_diff(f_a, a0.data(), 1e-4);
    assert_grad_close(tape.grad(a).unwrap(), &numeric, 1e-5, 1e-9);

    let f_b = |x: &[f64]| {
        let mut tp = Tape::new();
        let a = tp.leaf(a0.clone());
        let b = tp.leaf(t(4, 2, x));
        let c = tp.matmul(a, b).unwrap();
        let s = tp.sum(c).unwrap();
        tp.value(s).data()[0]
    };
    let numeric = finite_diff(f_b, b0.data(), 1e-4);
    assert_grad_close(tape.grad(b).unwrap(), &numeric, 1e-5, 1e-9);
}

#[test]
fn sigmoid_values() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(1, 3, &[0.0, -50.0, 50.0]));
    let y = tape.sigmoid(x).unwrap();
    let d = tape.value(y).data();
    assert_eq!(d[0], 0.5);
    assert!(d[1] > 0.0 && d[1] <= 1e-20, "saturated low: {}", d[1]);
    assert!(d[2] <= 1.0 && d[2] > 1.0 - 1e-15);
    assert!(d.iter().all(|v| v.is_finite()));
}

#[test]
fn sigmoid_gradient_at_zero_is_quarter() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(1, 1, &[0.0]).with_grad());
    let y = tape.sigmoid(x).unwrap();
    let loss = tape.sum(y).unwrap();
    tape.backward(loss).unwrap();
    assert!((tape.grad(x).unwrap()[0] - 0.25).abs() < 1e-15);
}

#[test]
fn softmax_uniform_on_equal_inputs() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(1, 2, &[0.0, 0.0]));
    let y = tape.softmax_row(x, None).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn softmax_mask_removes_entry() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(1, 3, &[1.0, 1.0, 1.0]));
    let y = tape.softmax_row(x, Some(&[true, true, false])).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.0]);
}

#[test]
fn softmax_all_masked_is_degenerate() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(1, 2, &[1.0, 2.0]));
    let err = tape.softmax_row(x, Some(&[false, false])).unwrap_err();
    assert!(matches!(err, Error::DegenerateRow { row: 0 }));
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = rng_from_seed(5);
    let x0 = Tensor::uniform(1, 6, -2.0, 2.0, &mut rng);
    let v = Tensor::uniform(6, 1, -1.0, 1.0, &mut rng);

    // scalar probe: v . softmax(x)
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone().with_grad());
    let sm = tape.softmax_row(x, None).unwrap();
    let vid = tape.leaf(v.clone());
    let s = tape.matmul(sm, vid).unwrap();
    tape.backward(s).unwrap();

    let f = |probe: &[f64]| {
        let mut tp = Tape::new();
        let x = tp.leaf(t(1, 6, probe));
        let sm = tp.softmax_row(x, None).unwrap();
        let vid = tp.leaf(v.clone());
        let s = tp.matmul(sm, vid).unwrap();
        tp.value(s).data()[0]
    };
    let numeric = finite_diff(f, x0.data(), 1e-4);
    assert_grad_close(tape.grad(x).unwrap(), &numeric, 1e-5, 1e-9);
}

#[test]
fn softmax_no_diag_keeps_lonely_row() {
    // 1x1: the diagonal is the only entry, so it must survive.
    let mut tape = Tape::new();
    let x = tape.leaf(t(1, 1, &[3.0]));
    let y = tape.softmax_row_no_diag(x, None).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0]);

    // 3x3 with pads: row 0's only admissible non-diagonal is column 1.
    let mut tape = Tape::new();
    let x = tape.leaf(t(3, 3, &[0.0; 9]));
    let y = tape
        .softmax_row_no_diag(x, Some(&[true, true, false]))
        .unwrap();
    let d = tape.value(y).data();
    assert_eq!(&d[0..3], &[0.0, 1.0, 0.0]);
    assert_eq!(&d[3..6], &[1.0, 0.0, 0.0]);
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).with_grad());
    let loss = tape.sum(x).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_of_sum_sigmoid_at_zero() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(2, 2, &[0.0; 4]).with_grad());
    let y = tape.sigmoid(x).unwrap();
    let loss = tape.sum(y).unwrap();
    tape.backward(loss).unwrap();
    for &g in tape.grad(x).unwrap() {
        assert!((g - 0.25).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(1, 2, &[1.0, 2.0]).with_grad());
    let err = tape.backward(x).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn repeated_backward_accumulates() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(1, 2, &[1.0, 2.0]).with_grad());
    let loss = tape.sum(x).unwrap();
    tape.backward(loss).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    tape.zero_grads();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
}

#[test]
fn gather_scatter_gradient() {
    let table0 = t(4, 2, &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let mut tape = Tape::new();
    let table = tape.leaf(table0.clone().with_grad());
    let picked = tape.gather_rows(table, &[2, 1, 2]).unwrap();
    assert_eq!(tape.value(picked).data(), &[3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
    let loss = tape.sum(picked).unwrap();
    tape.backward(loss).unwrap();
    // row 2 hit twice, row 1 once, rows 0 and 3 untouched
    assert_eq!(
        tape.grad(table).unwrap(),
        &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 0.0, 0.0]
    );
}

#[test]
fn gather_rejects_out_of_range() {
    let mut tape = Tape::new();
    let table = tape.leaf(t(2, 2, &[0.0; 4]));
    assert!(tape.gather_rows(table, &[2]).is_err());
}

#[test]
fn concat_and_slice_gradients() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(1, 2, &[1.0, 2.0]).with_grad());
    let b = tape.leaf(t(1, 3, &[3.0, 4.0, 5.0]).with_grad());
    let cat = tape.concat_cols(a, b).unwrap();
    assert_eq!(tape.value(cat).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
    let w = tape.leaf(t(5, 1, &[1.0, 10.0, 100.0, 1000.0, 10000.0]));
    let s = tape.matmul(cat, w).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(a).unwrap(), &[1.0, 10.0]);
    assert_eq!(tape.grad(b).unwrap(), &[100.0, 1000.0, 10000.0]);
}

#[test]
fn add_row_broadcast_gradient() {
    let mut rng = rng_from_seed(17);
    let a0 = Tensor::uniform(3, 2, -1.0, 1.0, &mut rng);
    let r0 = Tensor::uniform(1, 2, -1.0, 1.0, &mut rng);

    let mut tape = Tape::new();
    let a = tape.leaf(a0.clone().with_grad());
    let r = tape.leaf(r0.clone().with_grad());
    let y = tape.add_row_broadcast(a, r).unwrap();
    let sg = tape.sigmoid(y).unwrap();
    let loss = tape.sum(sg).unwrap();
    tape.backward(loss).unwrap();

    let f_r = |probe: &[f64]| {
        let mut tp = Tape::new();
        let a = tp.leaf(a0.clone());
        let r = tp.leaf(t(1, 2, probe));
        let y = tp.add_row_broadcast(a, r).unwrap();
        let sg = tp.sigmoid(y).unwrap();
        let s = tp.sum(sg).unwrap();
        tp.value(s).data()[0]
    };
    let numeric = finite_diff(f_r, r0.data(), 1e-4);
    assert_grad_close(tape.grad(r).unwrap(), &numeric, 1e-6, 1e-9);
}

#[test]
fn masked_mean_offdiag_values_and_gradient() {
    // alpha over [[.2,.4],[.3,.2]] with both valid: [.4/2, .3/2] = [0.2, 0.15]
    let c0 = t(2, 2, &[0.2, 0.4, 0.3, 0.2]);
    let mut tape = Tape::new();
    let c = tape.leaf(c0.clone().with_grad());
    let alpha = tape.masked_mean_offdiag(c, &[true, true]).unwrap();
    let av = tape.value(alpha).data();
    assert!((av[0] - 0.2).abs() < 1e-15 && (av[1] - 0.15).abs() < 1e-15);

    let w = tape.leaf(t(2, 1, &[1.0, -2.0]));
    let s = tape.matmul(alpha, w).unwrap();
    tape.backward(s).unwrap();
    let f = |probe: &[f64]| {
        let mut tp = Tape::new();
        let c = tp.leaf(t(2, 2, probe));
        let alpha = tp.masked_mean_offdiag(c, &[true, true]).unwrap();
        let w = tp.leaf(t(2, 1, &[1.0, -2.0]));
        let s = tp.matmul(alpha, w).unwrap();
        tp.value(s).data()[0]
    };
    let numeric = finite_diff(f, c0.data(), 1e-4);
    assert_grad_close(tape.grad(c).unwrap(), &numeric, 1e-6, 1e-12);
}

#[test]
fn masked_mean_offdiag_single_item_is_zero() {
    let mut tape = Tape::new();
    let c = tape.leaf(t(1, 1, &[0.7]));
    let alpha = tape.masked_mean_offdiag(c, &[true]).unwrap();
    assert_eq!(tape.value(alpha).data(), &[0.0]);
}

#[test]
fn candidate_scores_skip_pad_row_and_backprop() {
    let table0 = t(3, 2, &[9.0, 9.0, 1.0, 0.0, 0.0, 1.0]); // row 0 = pad
    let z0 = t(1, 2, &[2.0, 3.0]);
    let mut tape = Tape::new();
    let table = tape.leaf(table0.clone().with_grad());
    let z = tape.leaf(z0.clone().with_grad());
    let s = tape.candidate_scores(z, table).unwrap();
    assert_eq!(tape.value(s).data(), &[2.0, 3.0]);

    let w = tape.leaf(t(2, 1, &[1.0, 1.0]));
    let loss = tape.matmul(s, w).unwrap();
    tape.backward(loss).unwrap();
    // pad row receives no gradient
    assert_eq!(&tape.grad(table).unwrap()[0..2], &[0.0, 0.0]);
    assert_eq!(tape.grad(z).unwrap(), &[1.0, 1.0]);
}

#[test]
fn bce_loss_hand_value_and_gradient() {
    // n=2, probs (0.5, 0.5), target 0 -> L = -ln .5 - ln .5 = 2 ln 2
    let mut tape = Tape::new();
    let p = tape.leaf(t(1, 2, &[0.5, 0.5]).with_grad());
    let loss = tape.bce_loss(p, 0).unwrap();
    assert!((tape.value(loss).data()[0] - 2.0 * (2.0f64).ln()).abs() < 1e-15);
    tape.backward(loss).unwrap();
    // d/dp0 = -1/p0 = -2; d/dp1 = 1/(1-p1) = 2
    assert_eq!(tape.grad(p).unwrap(), &[-2.0, 2.0]);
}

#[test]
fn nll_loss_value_and_gradient() {
    let mut tape = Tape::new();
    let p = tape.leaf(t(1, 3, &[0.2, 0.5, 0.3]).with_grad());
    let loss = tape.nll_loss(p, 1).unwrap();
    assert!((tape.value(loss).data()[0] - (-(0.5f64).ln())).abs() < 1e-15);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(p).unwrap(), &[0.0, -2.0, 0.0]);
}

#[test]
fn composed_graph_gradient_matches_finite_differences() {
    // sigmoid -> matmul -> softmax -> nll, checked end to end.
    let mut rng = rng_from_seed(23);
    let x0 = Tensor::uniform(2, 3, -1.5, 1.5, &mut rng);
    let w0 = Tensor::uniform(3, 4, -1.0, 1.0, &mut rng);

    let run = |xd: &[f64], wd: &[f64]| -> (f64, Option<Vec<f64>>, Option<Vec<f64>>) {
        let mut tp = Tape::new();
        let x = tp.leaf(t(2, 3, xd).with_grad());
        let w = tp.leaf(t(3, 4, wd).with_grad());
        let h = tp.sigmoid(x).unwrap();
        let o = tp.matmul(h, w).unwrap();
        let sm = tp.softmax_row(o, None).unwrap();
        let ones = tp.leaf(t(4, 1, &[0.3, -0.2, 0.9, 0.1]));
        let col = tp.matmul(sm, ones).unwrap();
        let loss = tp.sum(col).unwrap();
        tp.backward(loss).unwrap();
        (
            tp.value(loss).data()[0],
            tp.grad(x).map(|g| g.to_vec()),
            tp.grad(w).map(|g| g.to_vec()),
        )
    };
    let (_, gx, gw) = run(x0.data(), w0.data());

    let fx = |probe: &[f64]| run(probe, w0.data()).0;
    let fw = |probe: &[f64]| run(x0.data(), probe).0;
    assert_grad_close(&gx.unwrap(), &finite_diff(fx, x0.data(), 1e-4), 1e-4, 1e-6);
    assert_grad_close(&gw.unwrap(), &finite_diff(fw, w0.data(), 1e-4), 1e-4, 1e-6);
}

#[test]
fn leaves_without_grad_stay_clean() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(1, 2, &[1.0, 2.0]));
    let loss = tape.sum(x).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(x).is_none());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-1e3..1e3f64, 8)) {
        let mut tape = Tape::new();
        let x = tape.leaf(t(2, 4, &vals));
        let y = tape.softmax_row(x, None).unwrap();
        let d = tape.value(y).data();
        for r in 0..2 {
            let row = &d[r * 4..(r + 1) * 4];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn primitives_stay_finite_for_bounded_inputs(vals in proptest::collection::vec(-1e3..1e3f64, 12)) {
        let mut tape = Tape::new();
        let x = tape.leaf(t(3, 4, &vals));
        let s = tape.sigmoid(x).unwrap();
        let xt = tape.transpose(x).unwrap();
        let m = tape.matmul(s, xt).unwrap();
        let sm = tape.softmax_row(m, None).unwrap();
        let total = tape.sum(sm).unwrap();
        prop_assert!(tape.value(m).is_finite());
        prop_assert!(tape.value(sm).is_finite());
        prop_assert!(tape.value(total).is_finite());
    }

    #[test]
    fn forward_is_deterministic(vals in proptest::collection::vec(-10.0..10.0f64, 6)) {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(t(2, 3, &vals));
            let s = tape.sigmoid(x).unwrap();
            let xt = tape.transpose(s).unwrap();
            let m = tape.matmul(s, xt).unwrap();
            tape.value(m).data().to_vec()
        };
        let a = run();
        let b = run();
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
