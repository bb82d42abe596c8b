//! Worked examples and algebraic properties of the tape ops.

use fracadapt::autodiff::{AutodiffError, Tape, Tensor};
use proptest::prelude::*;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

fn conv(x: Tensor<f64>, w: Tensor<f64>, b: Tensor<f64>, stride: usize) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (x, w, b) = (tape.constant(x), tape.constant(w), tape.constant(b));
    let y = tape.conv3d(x, w, b, stride).unwrap();
    tape.value(y).clone()
}

fn delta_kernel(c: usize) -> Tensor<f64> {
    let mut w = vec![0.0; c * c * 27];
    for i in 0..c {
        w[(i * c + i) * 27 + 13] = 1.0;
    }
    t(&[c, c, 3, 3, 3], w)
}

#[test]
fn delta_kernel_is_identity() {
    let x = t(&[2, 3, 4, 5], (0..120).map(|i| (i as f64 * 0.37).sin()).collect());
    let y = conv(x.clone(), delta_kernel(2), t(&[2], vec![0.0; 2]), 1);
    assert_eq!(y, x);
}

#[test]
fn all_ones_conv_counts_in_bounds_taps() {
    let y = conv(
        t(&[1, 4, 4, 4], vec![1.0; 64]),
        t(&[1, 1, 3, 3, 3], vec![1.0; 27]),
        t(&[1], vec![0.0]),
        1,
    );
    let at = |z: usize, yy: usize, x: usize| y.data()[(z * 4 + yy) * 4 + x];
    assert_eq!(at(1, 1, 1), 27.0);
    assert_eq!(at(0, 0, 0), 8.0);
    assert_eq!(at(3, 3, 3), 8.0);
    assert_eq!(at(0, 1, 1), 18.0);
}

#[test]
fn stride_two_rounds_output_up() {
    let y = conv(
        t(&[1, 5, 3, 1], vec![1.0; 15]),
        t(&[2, 1, 3, 3, 3], vec![0.5; 54]),
        t(&[2], vec![0.0, 1.0]),
        2,
    );
    assert_eq!(y.shape(), &[2, 3, 2, 1]);
}

#[test]
fn conv_rejects_channel_mismatch_and_bad_stride() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 2, 2, 2], vec![0.0; 16]));
    let w = tape.constant(t(&[1, 3, 3, 3, 3], vec![0.0; 81]));
    let b = tape.constant(t(&[1], vec![0.0]));
    assert!(matches!(
        tape.conv3d(x, w, b, 1),
        Err(AutodiffError::ChannelMismatch { expected: 3, found: 2 })
    ));
    assert_eq!(tape.conv3d(x, w, b, 3), Err(AutodiffError::UnsupportedStride(3)));
}

#[test]
fn relu_values_and_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1, 1, 1, 3], vec![-1.0, 0.0, 2.0]), true);
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let yy = tape.relu(y);
    assert_eq!(tape.value(yy), tape.value(y));
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn upsample_replicates_and_adjoint_sum_pools() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1, 1, 1, 1], vec![5.0]), true);
    let y = tape.upsample2(x).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 2, 2, 2]);
    assert!(tape.value(y).data().iter().all(|&v| v == 5.0));

    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2, 2, 1, 3], (0..12).map(f64::from).collect()), true);
    let y = tape.upsample2(x).unwrap();
    let sx: f64 = tape.value(x).data().iter().sum();
    let sy: f64 = tape.value(y).data().iter().sum();
    assert_eq!(sy, 8.0 * sx);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|&g| g == 8.0));
}

#[test]
fn concat_orders_channels_and_splits_gradient() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[2, 1, 2, 2], (0..8).map(f64::from).collect()), true);
    let b = tape.leaf(t(&[3, 1, 2, 2], vec![-1.0; 12]), true);
    let c = tape.concat_channels(a, b).unwrap();
    assert_eq!(tape.value(c).shape(), &[5, 1, 2, 2]);
    assert_eq!(tape.value(c).channel(0), tape.value(a).channel(0));
    assert_eq!(tape.value(c).channel(4), tape.value(b).channel(2));
    let s = tape.sum(c);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(a).unwrap().len(), 8);
    assert_eq!(tape.grad(b).unwrap().len(), 12);

    let d = tape.constant(t(&[1, 1, 2, 1], vec![0.0; 2]));
    assert!(tape.concat_channels(a, d).is_err());
}

#[test]
fn conv1x1_is_affine_per_voxel() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 2, 2], vec![1.0, -2.0, 0.5, 3.0]));
    let w = tape.constant(t(&[1, 1, 1, 1, 1], vec![2.0]));
    let b = tape.constant(t(&[1], vec![1.0]));
    let y = tape.conv1x1(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, -3.0, 2.0, 7.0]);

    let x = tape.constant(t(&[3, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let mut eye = vec![0.0; 9];
    for i in 0..3 {
        eye[i * 3 + i] = 1.0;
    }
    let w = tape.constant(t(&[3, 3, 1, 1, 1], eye));
    let b = tape.constant(t(&[3], vec![0.0; 3]));
    let y = tape.conv1x1(x, w, b).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

fn softmax(x: Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let p = tape.softmax_channels(v).unwrap();
    tape.value(p).clone()
}

#[test]
fn softmax_worked_examples() {
    assert_eq!(softmax(t(&[2, 1, 1, 1], vec![0.0, 0.0])).data(), &[0.5, 0.5]);
    assert_eq!(softmax(t(&[2, 1, 1, 1], vec![1000.0, 0.0])).data(), &[1.0, 0.0]);
}

fn dice(p: Tensor<f64>, target: Tensor<f64>, eps: f64) -> f64 {
    let mut tape = Tape::new();
    let v = tape.constant(p);
    let l = tape.dice_loss(v, target, eps).unwrap();
    tape.value(l).data()[0]
}

#[test]
fn dice_of_perfect_prediction_vanishes() {
    let n = 1000;
    let mut hard = vec![0.0; 5 * n];
    for v in 0..n {
        hard[(v % 5) * n + v] = 1.0;
    }
    let p = t(&[5, 10, 10, 10], hard);
    assert!(dice(p.clone(), p, 1e-5) <= 1e-6);
}

#[test]
fn dice_of_uniform_prediction_matches_hand_formula() {
    let v = 100;
    let eps = 1e-5;
    let p = t(&[5, 1, 10, 10], vec![0.2; 5 * v]);
    let mut target = vec![0.0; 5 * v];
    target[2 * v..3 * v].iter_mut().for_each(|x| *x = 1.0);
    let present = (2.0 * 0.2 * v as f64 + eps) / (0.2 * v as f64 + v as f64 + eps);
    let absent = eps / (0.2 * v as f64 + eps);
    let expected = 1.0 - (present + 4.0 * absent) / 5.0;
    let got = dice(p, t(&[5, 1, 10, 10], target), eps);
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    assert!((present - 1.0 / 3.0).abs() < 1e-6);
}

#[test]
fn dice_rejects_shape_mismatch() {
    let mut tape = Tape::new();
    let p = tape.constant(t(&[2, 1, 1, 2], vec![0.5; 4]));
    assert!(tape.dice_loss(p, t(&[2, 1, 2, 1], vec![0.5; 4]), 1e-5).is_err());
}

#[test]
fn backward_of_sum_is_ones_and_single_use() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1, 2, 2, 2], vec![0.3; 8]), true);
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 8]);
    assert_eq!(tape.backward(s), Err(AutodiffError::AlreadyBackpropagated));
}

#[test]
fn fan_out_gradients_accumulate() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1, 1, 1, 2], vec![1.0, -1.0]), true);
    let a = tape.sum(x);
    let b = tape.sum(x);
    let m = tape.mean(&[a, b, a]).unwrap();
    tape.backward(m).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
}

fn arb_tensor(shape: [usize; 4]) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-3.0f64..3.0, n).prop_map(move |d| t(&shape, d))
}

fn arb_kernel() -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-1.0f64..1.0, 2 * 2 * 27).prop_map(|d| t(&[2, 2, 3, 3, 3], d))
}

fn rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    let scale = a.iter().chain(b).fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear_in_input(
        x in arb_tensor([2, 3, 4, 3]),
        y in arb_tensor([2, 3, 4, 3]),
        w in arb_kernel(),
        alpha in -2.0f64..2.0,
        beta in -2.0f64..2.0,
        stride in 1usize..=2,
    ) {
        let zero = t(&[2], vec![0.0; 2]);
        let mix = t(&[2, 3, 4, 3], x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + beta * b).collect());
        let lhs = conv(mix, w.clone(), zero.clone(), stride);
        let cx = conv(x, w.clone(), zero.clone(), stride);
        let cy = conv(y, w, zero, stride);
        let rhs: Vec<f64> = cx.data().iter().zip(cy.data()).map(|(a, b)| alpha * a + beta * b).collect();
        prop_assert!(rel_close(lhs.data(), &rhs, 1e-5));
    }

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(x in arb_tensor([4, 2, 2, 3]), shifts in prop::collection::vec(-50.0f64..50.0, 12)) {
        let p = softmax(x.clone());
        for v in 0..12 {
            let s: f64 = (0..4).map(|c| p.data()[c * 12 + v]).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
        let mut shifted = x.clone();
        for c in 0..4 {
            for v in 0..12 {
                shifted.data_mut()[c * 12 + v] += shifts[v];
            }
        }
        let q = softmax(shifted);
        prop_assert!(p.data().iter().zip(q.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn dice_stays_in_unit_interval(x in arb_tensor([5, 2, 2, 2]), labels in prop::collection::vec(0usize..5, 8)) {
        let p = softmax(x);
        let mut target = vec![0.0; 40];
        for (v, &c) in labels.iter().enumerate() {
            target[c * 8 + v] = 1.0;
        }
        let l = dice(p, t(&[5, 2, 2, 2], target), 1e-5);
        prop_assert!((0.0..=1.0).contains(&l));
    }

    #[test]
    fn upsample_adjoint_conserves_gradient_sum(x in arb_tensor([2, 2, 3, 1])) {
        let mut tape = Tape::new();
        let xv = tape.leaf(x, true);
        let y = tape.upsample2(xv).unwrap();
        let n_out = tape.value(y).len() as f64;
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let total: f64 = tape.grad(xv).unwrap().iter().sum();
        prop_assert_eq!(total, n_out);
    }
}
