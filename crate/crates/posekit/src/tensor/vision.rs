//! RoI align as a differentiable tape op.
//!
//! Coordinate convention: a feature pixel `(r, c)` has its sample point at
//! continuous coordinates `(c + 0.5, r + 0.5)`, so a box spanning the whole
//! map sampled at bin centers reproduces the map exactly. Boxes arrive in
//! input-image pixels, are scaled by `spatial_scale` and clipped to the
//! feature extent. Each output cell averages `samples x samples` bilinear
//! taps placed at even fractions inside the bin; taps are clamped to the
//! valid interpolation range at the border.
//!
//! Gradients flow to the feature map always, and to the box coordinates
//! whenever the boxes node is grad-tracked (chain through sample positions,
//! zero where clipping or clamping is active).

use ndarray::{ArrayD, Ix3, IxDyn};

use super::{Tape, Var};
use crate::scalar::Scalar;

struct SampleRec<S> {
    /// Box index.
    n: u32,
    /// Flattened output cell `oy * OW + ox` within the box.
    cell: u32,
    /// Flattened tap indices `y * W + x` into one feature plane.
    i00: u32,
    i01: u32,
    i10: u32,
    i11: u32,
    /// Bilinear weights pre-multiplied by the sample-average factor.
    w00: S,
    w01: S,
    w10: S,
    w11: S,
    /// Raw interpolation fractions, for box-coordinate gradients.
    wx: S,
    wy: S,
    /// d(sample x)/d(x1px), d(sample x)/d(x2px) and the y equivalents,
    /// including the average factor; zero where clipping/clamping cuts the
    /// chain.
    dx_dx1: S,
    dx_dx2: S,
    dy_dy1: S,
    dy_dy2: S,
}

/// Clamps `v` into `[0, hi]`, returning the value and whether the gradient
/// survives (inside the interval).
fn clamp_track<S: Scalar>(v: S, hi: S) -> (S, bool) {
    if v < S::zero() {
        (S::zero(), false)
    } else if v > hi {
        (hi, false)
    } else {
        (v, true)
    }
}

#[allow(clippy::too_many_arguments)]
fn build_records<S: Scalar>(
    boxes: &ArrayD<S>,
    scale: S,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    samples: usize,
) -> Vec<SampleRec<S>> {
    let n_boxes = boxes.shape()[0];
    let inv = S::one() / S::of((samples * samples) as f64);
    let wf = S::of(w as f64);
    let hf = S::of(h as f64);
    let mut recs = Vec::with_capacity(n_boxes * oh * ow * samples * samples);
    for n in 0..n_boxes {
        let bx = |k: usize| boxes[IxDyn(&[n, k])];
        for &v in &[bx(0), bx(1), bx(2), bx(3)] {
            assert!(v.is_finite(), "roi_align: non-finite box coordinate");
        }
        let (x1, x1_live) = clamp_track(bx(0) * scale, wf);
        let (y1, y1_live) = clamp_track(bx(1) * scale, hf);
        let (x2, x2_live) = clamp_track(bx(2) * scale, wf);
        let (y2, y2_live) = clamp_track(bx(3) * scale, hf);
        let bin_w = (x2 - x1) / S::of(ow as f64);
        let bin_h = (y2 - y1) / S::of(oh as f64);
        for oy in 0..oh {
            for ox in 0..ow {
                for sy in 0..samples {
                    for sx in 0..samples {
                        let fx = (S::of(ox as f64)
                            + (S::of(sx as f64) + S::of(0.5)) / S::of(samples as f64))
                            / S::of(ow as f64);
                        let fy = (S::of(oy as f64)
                            + (S::of(sy as f64) + S::of(0.5)) / S::of(samples as f64))
                            / S::of(oh as f64);
                        // Sample position in feature coordinates.
                        let x = x1 + bin_w * fx * S::of(ow as f64);
                        let y = y1 + bin_h * fy * S::of(oh as f64);
                        // Shift into the interpolation frame where pixel
                        // centers sit at integers, then clamp.
                        let (u, u_live) = clamp_track(x - S::of(0.5), wf - S::one());
                        let (v, v_live) = clamp_track(y - S::of(0.5), hf - S::one());
                        let x0 = (u.as_f64().floor() as usize).min(w.saturating_sub(1));
                        let y0 = (v.as_f64().floor() as usize).min(h.saturating_sub(1));
                        let x1i = (x0 + 1).min(w - 1);
                        let y1i = (y0 + 1).min(h - 1);
                        let wx = u - S::of(x0 as f64);
                        let wy = v - S::of(y0 as f64);
                        let one = S::one();
                        // Chain rule pieces for box gradients: x depends on
                        // x1 with factor (1 - fx) and on x2 with factor fx,
                        // each gated on the clamps being inactive.
                        let gx = if u_live { inv * scale } else { S::zero() };
                        let gy = if v_live { inv * scale } else { S::zero() };
                        recs.push(SampleRec {
                            n: n as u32,
                            cell: (oy * ow + ox) as u32,
                            i00: (y0 * w + x0) as u32,
                            i01: (y0 * w + x1i) as u32,
                            i10: (y1i * w + x0) as u32,
                            i11: (y1i * w + x1i) as u32,
                            w00: inv * (one - wx) * (one - wy),
                            w01: inv * wx * (one - wy),
                            w10: inv * (one - wx) * wy,
                            w11: inv * wx * wy,
                            wx,
                            wy,
                            dx_dx1: if x1_live { gx * (one - fx) } else { S::zero() },
                            dx_dx2: if x2_live { gx * fx } else { S::zero() },
                            dy_dy1: if y1_live { gy * (one - fy) } else { S::zero() },
                            dy_dy2: if y2_live { gy * fy } else { S::zero() },
                        });
                    }
                }
            }
        }
    }
    recs
}

impl<S: Scalar> Tape<S> {
    /// Extracts `out_hw` grids from `feat (C,H,W)` for each box in
    /// `boxes (N,4)` given as `(x1,y1,x2,y2)` input-image pixels.
    /// Returns `(N,C,OH,OW)`.
    pub fn roi_align(
        &mut self,
        feat: Var,
        boxes: Var,
        spatial_scale: S,
        out_hw: (usize, usize),
        samples: usize,
    ) -> Var {
        let fv = self.value(feat);
        assert_eq!(fv.ndim(), 3, "roi_align: feature must be (C,H,W)");
        let (c, h, w) = {
            let s = fv.shape();
            (s[0], s[1], s[2])
        };
        let bv = self.value(boxes);
        assert_eq!(bv.ndim(), 2, "roi_align: boxes must be (N,4)");
        assert_eq!(bv.shape()[1], 4, "roi_align: boxes must be (N,4)");
        let n = bv.shape()[0];
        assert!(n > 0, "roi_align: no boxes");
        assert!(samples > 0, "roi_align: samples must be positive");
        let (oh, ow) = out_hw;
        assert!(oh > 0 && ow > 0, "roi_align: empty output grid");

        let recs = build_records(bv, spatial_scale, h, w, oh, ow, samples);
        let hw = h * w;
        let cell_count = oh * ow;

        let fv_std = fv.as_standard_layout();
        let feat_slice = fv_std.as_slice().expect("roi_align: feature slice");
        let mut out = vec![S::zero(); n * c * cell_count];
        for ch in 0..c {
            let plane = &feat_slice[ch * hw..(ch + 1) * hw];
            for r in &recs {
                let v = r.w00 * plane[r.i00 as usize]
                    + r.w01 * plane[r.i01 as usize]
                    + r.w10 * plane[r.i10 as usize]
                    + r.w11 * plane[r.i11 as usize];
                out[(r.n as usize * c + ch) * cell_count + r.cell as usize] += v;
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, oh, ow]), out)
            .expect("roi_align: output shape");

        let needs = self.needs_grad(feat) || self.needs_grad(boxes);
        if !needs {
            return self.push_node(value, false, None);
        }
        let backward = move |t: &Tape<S>, g: &ArrayD<S>| {
            let g_std = g.as_standard_layout();
            let g_slice = g_std.as_slice().expect("roi_align backward: grad slice");
            let mut outs = Vec::with_capacity(2);
            if t.needs_grad(feat) {
                let mut dfeat = vec![S::zero(); c * hw];
                for ch in 0..c {
                    let dplane = &mut dfeat[ch * hw..(ch + 1) * hw];
                    for r in &recs {
                        let gv = g_slice[(r.n as usize * c + ch) * cell_count + r.cell as usize];
                        dplane[r.i00 as usize] += gv * r.w00;
                        dplane[r.i01 as usize] += gv * r.w01;
                        dplane[r.i10 as usize] += gv * r.w10;
                        dplane[r.i11 as usize] += gv * r.w11;
                    }
                }
                outs.push((
                    feat,
                    ArrayD::from_shape_vec(IxDyn(&[c, h, w]), dfeat).unwrap(),
                ));
            }
            if t.needs_grad(boxes) {
                let fv = t.value(feat);
                let f3 = fv.view().into_dimensionality::<Ix3>().unwrap();
                let f3_std = f3.as_standard_layout();
                let fs = f3_std.as_slice().unwrap();
                let nb = t.value(boxes).shape()[0];
                let mut dboxes = vec![S::zero(); nb * 4];
                let one = S::one();
                for r in &recs {
                    let mut acc_x = S::zero();
                    let mut acc_y = S::zero();
                    for ch in 0..c {
                        let plane = &fs[ch * hw..(ch + 1) * hw];
                        let f00 = plane[r.i00 as usize];
                        let f01 = plane[r.i01 as usize];
                        let f10 = plane[r.i10 as usize];
                        let f11 = plane[r.i11 as usize];
                        let gv = g_slice[(r.n as usize * c + ch) * cell_count + r.cell as usize];
                        acc_x += gv * ((one - r.wy) * (f01 - f00) + r.wy * (f11 - f10));
                        acc_y += gv * ((one - r.wx) * (f10 - f00) + r.wx * (f11 - f01));
                    }
                    let base = r.n as usize * 4;
                    dboxes[base] += acc_x * r.dx_dx1;
                    dboxes[base + 2] += acc_x * r.dx_dx2;
                    dboxes[base + 1] += acc_y * r.dy_dy1;
                    dboxes[base + 3] += acc_y * r.dy_dy2;
                }
                outs.push((
                    boxes,
                    ArrayD::from_shape_vec(IxDyn(&[nb, 4]), dboxes).unwrap(),
                ));
            }
            outs
        };
        self.push_node(value, true, Some(Box::new(backward)))
    }
}
