//! Matrix products and convolution ops.
//!
//! Convolution lowers to an im2col buffer and one GEMM so the work lands in
//! the BLAS-grade kernels behind `ndarray::dot`. The im2col buffer is kept
//! alive for the backward pass of the same step.

use ndarray::{s, Array2, Array4, ArrayD, ArrayView4, Axis, Ix2, Ix3, Ix4};

use super::{Tape, Var};
use crate::scalar::Scalar;

/// `ndarray`'s `dot` allocates its result in column-major order when both
/// operands have a row stride of 1 (which happens whenever a dimension
/// collapses to 1, e.g. a 1x1 feature map). Raw-order reshapes require
/// standard layout, so coerce before reshaping a GEMM result.
fn standardized<S: Scalar>(m: Array2<S>) -> Array2<S> {
    if m.is_standard_layout() {
        m
    } else {
        m.as_standard_layout().to_owned()
    }
}

/// Output length of a strided convolution along one spatial dimension.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(stride > 0, "stride must be positive");
    assert!(
        input + 2 * pad >= kernel,
        "conv input {input} (+2*{pad}) smaller than kernel {kernel}"
    );
    (input + 2 * pad - kernel) / stride + 1
}

impl<S: Scalar> Tape<S> {
    /// `(m,k) x (k,n) -> (m,n)` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self
            .value(a)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul: lhs must be rank 2");
        let bv = self
            .value(b)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul: rhs must be rank 2");
        assert_eq!(
            av.shape()[1],
            bv.shape()[0],
            "matmul: inner dims {} vs {}",
            av.shape()[1],
            bv.shape()[0]
        );
        let value = av.dot(&bv).into_dyn();
        let needs = self.needs_grad(a) || self.needs_grad(b);
        if !needs {
            return self.push_node(value, false, None);
        }
        let backward = move |t: &Tape<S>, g: &ArrayD<S>| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("grad rank 2");
            let av = t.value(a).view().into_dimensionality::<Ix2>().unwrap();
            let bv = t.value(b).view().into_dimensionality::<Ix2>().unwrap();
            let mut out = Vec::with_capacity(2);
            if t.needs_grad(a) {
                out.push((a, g2.dot(&bv.t()).into_dyn()));
            }
            if t.needs_grad(b) {
                out.push((b, av.t().dot(&g2).into_dyn()));
            }
            out
        };
        self.push_node(value, true, Some(Box::new(backward)))
    }

    /// Batched matrix product `(B,m,k) x (B,k,n) -> (B,m,n)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let a3 = self
            .value(a)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("bmm: lhs must be rank 3");
        let b3 = self
            .value(b)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("bmm: rhs must be rank 3");
        let (bt, m, k) = (a3.shape()[0], a3.shape()[1], a3.shape()[2]);
        assert_eq!(bt, b3.shape()[0], "bmm: batch mismatch");
        assert_eq!(k, b3.shape()[1], "bmm: inner dim mismatch");
        let n = b3.shape()[2];
        let mut value = ndarray::Array3::<S>::zeros((bt, m, n));
        for i in 0..bt {
            let prod = a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i));
            value.index_axis_mut(Axis(0), i).assign(&prod);
        }
        let value = value.into_dyn();
        let needs = self.needs_grad(a) || self.needs_grad(b);
        if !needs {
            return self.push_node(value, false, None);
        }
        let backward = move |t: &Tape<S>, g: &ArrayD<S>| {
            let g3 = g.view().into_dimensionality::<Ix3>().expect("grad rank 3");
            let a3 = t.value(a).view().into_dimensionality::<Ix3>().unwrap();
            let b3 = t.value(b).view().into_dimensionality::<Ix3>().unwrap();
            let bt = a3.shape()[0];
            let mut out = Vec::with_capacity(2);
            if t.needs_grad(a) {
                let mut da = ndarray::Array3::<S>::zeros(a3.raw_dim());
                for i in 0..bt {
                    let gi = g3.index_axis(Axis(0), i);
                    let bi = b3.index_axis(Axis(0), i);
                    da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                }
                out.push((a, da.into_dyn()));
            }
            if t.needs_grad(b) {
                let mut db = ndarray::Array3::<S>::zeros(b3.raw_dim());
                for i in 0..bt {
                    let gi = g3.index_axis(Axis(0), i);
                    let ai = a3.index_axis(Axis(0), i);
                    db.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                }
                out.push((b, db.into_dyn()));
            }
            out
        };
        self.push_node(value, true, Some(Box::new(backward)))
    }

    /// 2-D convolution: `x (B,C,H,W)`, `w (OC,C,KH,KW)`, optional `bias (OC)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d: input must be rank 4");
        let wv = self
            .value(w)
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv2d: weight must be rank 4");
        let (b, c, h, width) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (oc, wc, kh, kw) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        assert_eq!(c, wc, "conv2d: channel mismatch {c} vs {wc}");
        let oh = conv_out_len(h, kh, stride, pad);
        let ow = conv_out_len(width, kw, stride, pad);

        let col = im2col(&xv, kh, kw, stride, pad, oh, ow); // (C*KH*KW, B*OH*OW)
        let wmat = wv
            .to_shape((oc, c * kh * kw))
            .expect("conv2d: weight reshape")
            .to_owned();
        let mut out_m = wmat.dot(&col); // (OC, B*OH*OW)
        if let Some(bias) = bias {
            let bv = self.value(bias);
            assert_eq!(bv.len(), oc, "conv2d: bias length");
            for (mut row, &bval) in out_m.rows_mut().into_iter().zip(bv.iter()) {
                row.mapv_inplace(|v| v + bval);
            }
        }
        let value = standardized(out_m)
            .into_shape_with_order((oc, b, oh, ow))
            .expect("conv2d: output reshape")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned()
            .into_dyn();

        let needs = self.needs_grad(x)
            || self.needs_grad(w)
            || bias.map(|bv| self.needs_grad(bv)).unwrap_or(false);
        if !needs {
            return self.push_node(value, false, None);
        }
        let backward = move |t: &Tape<S>, g: &ArrayD<S>| {
            let g4 = g.view().into_dimensionality::<Ix4>().expect("grad rank 4");
            let gm = g4
                .permuted_axes([1, 0, 2, 3])
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order((oc, b * oh * ow))
                .expect("conv2d backward: grad reshape");
            let mut out = Vec::with_capacity(3);
            if let Some(bias) = bias {
                if t.needs_grad(bias) {
                    out.push((bias, gm.sum_axis(Axis(1)).into_dyn()));
                }
            }
            if t.needs_grad(w) {
                let dw = standardized(gm.dot(&col.t())); // (OC, C*KH*KW)
                let dw = dw
                    .into_shape_with_order((oc, c, kh, kw))
                    .expect("conv2d backward: dW reshape");
                out.push((w, dw.into_dyn()));
            }
            if t.needs_grad(x) {
                let wv = t.value(w).view().into_dimensionality::<Ix4>().unwrap();
                let wmat = wv.to_shape((oc, c * kh * kw)).unwrap().to_owned();
                let dcol = wmat.t().dot(&gm); // (C*KH*KW, B*OH*OW)
                let dx = col2im(&dcol, (b, c, h, width), kh, kw, stride, pad, oh, ow);
                out.push((x, dx.into_dyn()));
            }
            out
        };
        self.push_node(value, true, Some(Box::new(backward)))
    }

    /// Transposed convolution with a fixed 2x2 kernel and stride 2, the
    /// standard x2 learnable upsampling. `x (B,C,H,W)`, `w (C,OC,2,2)`,
    /// `bias (OC)`; output `(B,OC,2H,2W)`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, bias: Option<Var>) -> Var {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv_transpose2x2: input rank 4");
        let wv = self
            .value(w)
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv_transpose2x2: weight rank 4");
        let (b, c, h, width) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert_eq!(c, wv.shape()[0], "conv_transpose2x2: channel mismatch");
        assert_eq!(wv.shape()[2], 2, "conv_transpose2x2: kernel must be 2x2");
        assert_eq!(wv.shape()[3], 2, "conv_transpose2x2: kernel must be 2x2");
        let oc = wv.shape()[1];

        let xm = xv
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((c, b * h * width))
            .expect("conv_transpose2x2: input reshape");
        let mut value = Array4::<S>::zeros((b, oc, 2 * h, 2 * width));
        for i in 0..2 {
            for j in 0..2 {
                let wij: ndarray::ArrayView2<S> = wv.slice(s![.., .., i, j]); // (C, OC)
                let m = standardized(wij.t().dot(&xm)); // (OC, B*H*W)
                let m4 = m
                    .into_shape_with_order((oc, b, h, width))
                    .unwrap()
                    .permuted_axes([1, 0, 2, 3])
                    .as_standard_layout()
                    .to_owned();
                value
                    .slice_mut(s![.., .., i..;2, j..;2])
                    .assign(&m4);
            }
        }
        if let Some(bias) = bias {
            let bv = self.value(bias);
            assert_eq!(bv.len(), oc, "conv_transpose2x2: bias length");
            for (och, &bval) in bv.iter().enumerate() {
                value
                    .slice_mut(s![.., och, .., ..])
                    .mapv_inplace(|v| v + bval);
            }
        }
        let value = value.into_dyn();

        let needs = self.needs_grad(x)
            || self.needs_grad(w)
            || bias.map(|bv| self.needs_grad(bv)).unwrap_or(false);
        if !needs {
            return self.push_node(value, false, None);
        }
        let backward = move |t: &Tape<S>, g: &ArrayD<S>| {
            let g4 = g.view().into_dimensionality::<Ix4>().expect("grad rank 4");
            let xv = t.value(x).view().into_dimensionality::<Ix4>().unwrap();
            let wv = t.value(w).view().into_dimensionality::<Ix4>().unwrap();
            let xm = xv
                .permuted_axes([1, 0, 2, 3])
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order((c, b * h * width))
                .unwrap();
            let mut out = Vec::with_capacity(3);
            if let Some(bias) = bias {
                if t.needs_grad(bias) {
                    let mut db = ndarray::Array1::<S>::zeros(oc);
                    for och in 0..oc {
                        db[och] = g4.slice(s![.., och, .., ..]).sum();
                    }
                    out.push((bias, db.into_dyn()));
                }
            }
            let mut dw = Array4::<S>::zeros((c, oc, 2, 2));
            let mut dxm = Array2::<S>::zeros((c, b * h * width));
            for i in 0..2 {
                for j in 0..2 {
                    let gij = g4
                        .slice(s![.., .., i..;2, j..;2])
                        .permuted_axes([1, 0, 2, 3])
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order((oc, b * h * width))
                        .unwrap();
                    if t.needs_grad(w) {
                        dw.slice_mut(s![.., .., i, j]).assign(&xm.dot(&gij.t()));
                    }
                    if t.needs_grad(x) {
                        let wij: ndarray::ArrayView2<S> = wv.slice(s![.., .., i, j]); // (C, OC)
                        dxm += &wij.dot(&gij);
                    }
                }
            }
            if t.needs_grad(w) {
                out.push((w, dw.into_dyn()));
            }
            if t.needs_grad(x) {
                let dx = dxm
                    .into_shape_with_order((c, b, h, width))
                    .unwrap()
                    .permuted_axes([1, 0, 2, 3])
                    .as_standard_layout()
                    .to_owned();
                out.push((x, dx.into_dyn()));
            }
            out
        };
        self.push_node(value, true, Some(Box::new(backward)))
    }

    /// Nearest-neighbour x2 spatial upsampling of `(B,C,H,W)`.
    pub fn upsample2x_nearest(&mut self, x: Var) -> Var {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<Ix4>()
            .expect("upsample2x_nearest: input rank 4");
        let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let mut value = Array4::<S>::zeros((b, c, 2 * h, 2 * w));
        for i in 0..2 {
            for j in 0..2 {
                value.slice_mut(s![.., .., i..;2, j..;2]).assign(&xv);
            }
        }
        let value = value.into_dyn();
        self.unary(x, value, move |_, g| {
            let g4 = g.view().into_dimensionality::<Ix4>().expect("grad rank 4");
            let mut dx = Array4::<S>::zeros((b, c, h, w));
            for i in 0..2 {
                for j in 0..2 {
                    dx += &g4.slice(s![.., .., i..;2, j..;2]);
                }
            }
            vec![(x, dx.into_dyn())]
        })
    }
}

/// Unrolls `(B,C,H,W)` into `(C*KH*KW, B*OH*OW)` with zero padding, so that
/// `weights_matrix . col` computes the convolution.
pub(crate) fn im2col<S: Scalar>(
    x: &ArrayView4<S>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<S> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut col = Array2::<S>::zeros((c * kh * kw, b * oh * ow));
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row_idx = (ci * kh + i) * kw + j;
                let mut row = col.row_mut(row_idx);
                let (ow_lo, ow_hi) = valid_out_range(w, kw_offset(j, pad), stride, ow);
                for bi in 0..b {
                    for ohi in 0..oh {
                        let ih = (ohi * stride + i) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let x_line = x.slice(s![bi, ci, ih as usize, ..]);
                        let base = (bi * oh + ohi) * ow;
                        for owi in ow_lo..ow_hi {
                            let iw = (owi * stride + j) - pad;
                            row[base + owi] = x_line[iw];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds the column gradient back to input
/// pixel positions.
fn col2im<S: Scalar>(
    dcol: &Array2<S>,
    xshape: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array4<S> {
    let (b, c, h, w) = xshape;
    let mut dx = Array4::<S>::zeros((b, c, h, w));
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row_idx = (ci * kh + i) * kw + j;
                let row = dcol.row(row_idx);
                let (ow_lo, ow_hi) = valid_out_range(w, kw_offset(j, pad), stride, ow);
                for bi in 0..b {
                    for ohi in 0..oh {
                        let ih = (ohi * stride + i) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let mut dx_line = dx.slice_mut(s![bi, ci, ih as usize, ..]);
                        let base = (bi * oh + ohi) * ow;
                        for owi in ow_lo..ow_hi {
                            let iw = (owi * stride + j) - pad;
                            dx_line[iw] += row[base + owi];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Signed horizontal offset of kernel column `j` with padding `pad`.
fn kw_offset(j: usize, pad: usize) -> isize {
    j as isize - pad as isize
}

/// Output columns `ow` for which `ow*stride + offset` lands inside `[0, w)`.
fn valid_out_range(w: usize, offset: isize, stride: usize, ow: usize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let max_iw = w as isize - 1 - offset;
    if max_iw < 0 {
        return (0, 0);
    }
    let hi = (max_iw as usize / stride + 1).min(ow);
    (lo.min(hi), hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{arr2, Array, Array1};

    #[test]
    fn matmul_matches_manual_product() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = t.constant(arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn());
        let c = t.matmul(a, b);
        assert_eq!(t.value(c), &arr2(&[[19.0, 22.0], [43.0, 50.0]]).into_dyn());
    }

    #[test]
    fn conv2d_identity_kernel_reproduces_input() {
        // 1x1 kernel with weight 1 and zero bias is the identity map.
        let mut t = Tape::<f64>::new();
        let x_arr = Array::from_shape_vec((1, 1, 3, 3), (1..=9).map(f64::from).collect()).unwrap();
        let x = t.constant(x_arr.clone().into_dyn());
        let w = t.constant(Array::from_elem((1, 1, 1, 1), 1.0).into_dyn());
        let y = t.conv2d(x, w, None, 1, 0);
        assert_eq!(t.value(y), &x_arr.into_dyn());
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let mut t = Tape::<f64>::new();
        let x_arr =
            Array::from_shape_vec((1, 2, 4, 5), (0..40).map(|v| f64::from(v) * 0.1).collect())
                .unwrap();
        let w_arr =
            Array::from_shape_vec((3, 2, 3, 3), (0..54).map(|v| f64::from(v) * 0.01).collect())
                .unwrap();
        let b_arr = Array1::from_vec(vec![0.5, -0.25, 0.0]);
        let x = t.constant(x_arr.clone().into_dyn());
        let w = t.constant(w_arr.clone().into_dyn());
        let bias = t.constant(b_arr.clone().into_dyn());
        let y = t.conv2d(x, w, Some(bias), 2, 1);
        let yv = t.value(y);
        assert_eq!(yv.shape(), &[1, 3, 2, 3]);
        // Direct sum for one output location.
        for (oc, ohi, owi) in [(0usize, 0usize, 0usize), (2, 1, 2), (1, 1, 1)] {
            let mut acc = b_arr[oc];
            for c in 0..2 {
                for i in 0..3 {
                    for j in 0..3 {
                        let ih = (ohi * 2 + i) as isize - 1;
                        let iw = (owi * 2 + j) as isize - 1;
                        if ih >= 0 && ih < 4 && iw >= 0 && iw < 5 {
                            acc += x_arr[[0, c, ih as usize, iw as usize]] * w_arr[[oc, c, i, j]];
                        }
                    }
                }
            }
            assert_relative_eq!(yv[[0, oc, ohi, owi]], acc, max_relative = 1e-12);
        }
    }

    #[test]
    fn conv_transpose2x2_doubles_resolution_and_places_kernel_taps() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Array::from_shape_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0])
            .unwrap()
            .into_dyn());
        let w = t.constant(
            Array::from_shape_vec((1, 1, 2, 2), vec![10.0, 20.0, 30.0, 40.0])
                .unwrap()
                .into_dyn(),
        );
        let y = t.conv_transpose2x2(x, w, None);
        let yv = t.value(y);
        assert_eq!(yv.shape(), &[1, 1, 4, 4]);
        assert_eq!(yv[[0, 0, 0, 0]], 10.0);
        assert_eq!(yv[[0, 0, 0, 1]], 20.0);
        assert_eq!(yv[[0, 0, 1, 0]], 30.0);
        assert_eq!(yv[[0, 0, 1, 1]], 40.0);
        // (2,3) decomposes as 2h+i = 2*1+0, 2w+j = 2*1+1 -> x[1,1] * w[0,1].
        assert_eq!(yv[[0, 0, 2, 3]], 4.0 * 20.0);
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Array::from_shape_vec((1, 1, 1, 2), vec![1.0, 2.0]).unwrap().into_dyn());
        let y = t.upsample2x_nearest(x);
        assert_eq!(t.value(y).shape(), &[1, 1, 2, 4]);
        let s = t.sum_all(y);
        let grads = t.backward(s);
        let gx = grads.get(x).unwrap();
        assert_eq!(gx[[0, 0, 0, 0]], 4.0);
        assert_eq!(gx[[0, 0, 0, 1]], 4.0);
    }
}
