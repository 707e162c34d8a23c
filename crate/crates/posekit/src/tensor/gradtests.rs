//! Finite-difference checks for every tape op, on small random inputs.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::gradcheck::assert_gradients_close;

fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

fn positive(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(0.2..2.0))
}

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-7;

#[test]
fn grad_arithmetic_ops() {
    let a = randn(&[3, 4], 1);
    let b = randn(&[3, 4], 2);
    assert_gradients_close(
        |t, vs| {
            let s = t.add(vs[0], vs[1]);
            let d = t.sub(s, vs[0]);
            let m = t.mul(d, vs[1]);
            let sc = t.scale(m, 1.7);
            let sh = t.add_scalar(sc, 0.3);
            t.sum_all(sh)
        },
        &[a, b],
        EPS,
        TOL,
    );
}

#[test]
fn grad_div() {
    let a = randn(&[2, 3], 3);
    let b = positive(&[2, 3], 4);
    assert_gradients_close(
        |t, vs| {
            let q = t.div(vs[0], vs[1]);
            let sq = t.square(q);
            t.sum_all(sq)
        },
        &[a, b],
        EPS,
        TOL,
    );
}

#[test]
fn grad_activations() {
    // Keep values away from relu/abs kinks so the numeric diff is clean.
    let mut a = randn(&[20], 5);
    a.mapv_inplace(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    assert_gradients_close(
        |t, vs| {
            let r = t.relu(vs[0]);
            let s = t.sigmoid(vs[0]);
            let th = t.tanh(vs[0]);
            let sp = t.softplus(vs[0]);
            let ab = t.abs(vs[0]);
            let e = t.exp(vs[0]);
            let sum1 = t.add(r, s);
            let sum2 = t.add(th, sp);
            let sum3 = t.add(ab, e);
            let sum = t.add(sum1, sum2);
            let sum = t.add(sum, sum3);
            t.sum_all(sum)
        },
        &[a],
        EPS,
        TOL,
    );
}

#[test]
fn grad_ln_powf_on_positive_input() {
    let a = positive(&[7], 6);
    assert_gradients_close(
        |t, vs| {
            let l = t.ln(vs[0]);
            let p = t.powf(vs[0], -0.5);
            let s = t.add(l, p);
            t.sum_all(s)
        },
        &[a],
        EPS,
        TOL,
    );
}

#[test]
fn grad_clamp_and_min_max() {
    // Values chosen away from the clamp boundaries and pairwise ties.
    let a = randn(&[12], 7);
    let b = randn(&[12], 8);
    assert_gradients_close(
        |t, vs| {
            let c = t.clamp(vs[0], -0.5, 0.5);
            let mx = t.maximum(vs[0], vs[1]);
            let mn = t.minimum(vs[0], vs[1]);
            let s1 = t.add(c, mx);
            let s = t.add(s1, mn);
            t.sum_all(s)
        },
        &[a, b],
        EPS,
        TOL,
    );
}

#[test]
fn grad_reductions_and_broadcast() {
    let a = randn(&[2, 3, 4], 9);
    let b = randn(&[2, 1, 4], 10);
    assert_gradients_close(
        |t, vs| {
            let bb = t.broadcast_to(vs[1], &[2, 3, 4]);
            let m = t.mul(vs[0], bb);
            let s1 = t.sum_axis(m, 1, true);
            let s2 = t.mean_axis(s1, 2, false);
            let sq = t.square(s2);
            t.mean_all(sq)
        },
        &[a, b],
        EPS,
        TOL,
    );
}

#[test]
fn grad_softmax_last() {
    let a = randn(&[3, 5], 11);
    let w = randn(&[3, 5], 12);
    assert_gradients_close(
        |t, vs| {
            let sm = t.softmax_last(vs[0]);
            let weighted = t.mul(sm, vs[1]);
            t.sum_all(weighted)
        },
        &[a, w],
        EPS,
        TOL,
    );
}

#[test]
fn grad_shape_ops() {
    let a = randn(&[2, 3, 4], 13);
    let w = randn(&[4, 3, 2], 14);
    assert_gradients_close(
        |t, vs| {
            let p = t.permute(vs[0], &[2, 1, 0]);
            let m = t.mul(p, vs[1]);
            let r = t.reshape(m, &[4, 6]);
            let n = t.narrow(r, 1, 1, 3);
            let picked = t.index_select(n, 0, vec![0, 2, 2, 3]);
            let c = t.concat(&[picked, picked], 1);
            t.sum_all(c)
        },
        &[a, w],
        EPS,
        TOL,
    );
}

#[test]
fn grad_matmul_bmm() {
    let a = randn(&[3, 4], 15);
    let b = randn(&[4, 2], 16);
    let c = randn(&[2, 3, 4], 17);
    let d = randn(&[2, 4, 2], 18);
    assert_gradients_close(
        |t, vs| {
            let m = t.matmul(vs[0], vs[1]);
            let bm = t.bmm(vs[2], vs[3]);
            let bsum = t.sum_axis(bm, 0, false);
            let s = t.add(m, bsum);
            let sq = t.square(s);
            t.sum_all(sq)
        },
        &[a, b, c, d],
        EPS,
        TOL,
    );
}

#[test]
fn grad_conv2d_stride_and_pad() {
    let x = randn(&[2, 3, 5, 6], 19);
    let w = randn(&[4, 3, 3, 3], 20);
    let b = randn(&[4], 21);
    assert_gradients_close(
        |t, vs| {
            let y = t.conv2d(vs[0], vs[1], Some(vs[2]), 2, 1);
            let sq = t.square(y);
            t.sum_all(sq)
        },
        &[x, w, b],
        EPS,
        TOL,
    );
}

#[test]
fn grad_conv_transpose_and_upsample() {
    let x = randn(&[1, 3, 3, 4], 22);
    let w = randn(&[3, 2, 2, 2], 23);
    let b = randn(&[2], 24);
    assert_gradients_close(
        |t, vs| {
            let y = t.conv_transpose2x2(vs[0], vs[1], Some(vs[2]));
            let u = t.upsample2x_nearest(y);
            let sq = t.square(u);
            t.sum_all(sq)
        },
        &[x, w, b],
        EPS,
        TOL,
    );
}

#[test]
fn grad_roi_align_features_and_boxes() {
    let feat = randn(&[2, 6, 7], 25);
    // Boxes strictly inside the map so no clipping/clamping kinks interfere
    // with the finite-difference probe.
    let boxes = {
        let mut b = ArrayD::zeros(IxDyn(&[2, 4]));
        b[IxDyn(&[0, 0])] = 1.2;
        b[IxDyn(&[0, 1])] = 1.1;
        b[IxDyn(&[0, 2])] = 5.3;
        b[IxDyn(&[0, 3])] = 4.6;
        b[IxDyn(&[1, 0])] = 2.0;
        b[IxDyn(&[1, 1])] = 0.9;
        b[IxDyn(&[1, 2])] = 6.1;
        b[IxDyn(&[1, 3])] = 5.2;
        b
    };
    let w = randn(&[2, 2, 3, 3], 26);
    assert_gradients_close(
        |t, vs| {
            let roi = t.roi_align(vs[0], vs[1], 1.0, (3, 3), 2);
            let weighted = t.mul(roi, vs[2]);
            t.sum_all(weighted)
        },
        &[feat, boxes, w],
        1e-4,
        1e-6,
    );
}

#[test]
fn grad_flows_through_deep_composition() {
    // A miniature decoder-like chain touching most op families at once.
    let x = randn(&[1, 2, 8, 8], 27);
    let w1 = randn(&[3, 2, 3, 3], 28);
    let q = randn(&[4, 6], 29);
    let wq = randn(&[6, 6], 30);
    assert_gradients_close(
        |t: &mut Tape<f64>, vs: &[Var]| {
            let c = t.conv2d(vs[0], vs[1], None, 1, 1);
            let cr = t.relu(c);
            let feat = t.reshape(cr, &[3, 8, 8]);
            let boxes = t.constant(ndarray::arr2(&[
                [1.0, 1.0, 6.0, 6.0],
                [2.0, 0.5, 7.0, 5.0],
                [0.5, 2.0, 5.5, 7.5],
                [1.5, 1.5, 6.5, 6.5],
            ])
            .into_dyn());
            let roi = t.roi_align(feat, boxes, 1.0, (2, 1), 1); // (4,3,2,1)
            let flat = t.reshape(roi, &[4, 6]);
            let mix = t.matmul(flat, vs[3]);
            let joined = t.add(mix, vs[2]);
            let sm = t.softmax_last(joined);
            let lg = t.ln(sm);
            t.mean_all(lg)
        },
        &[x, w1, q, wq],
        EPS,
        1e-6,
    );
}
