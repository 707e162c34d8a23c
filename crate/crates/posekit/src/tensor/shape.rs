//! Shape manipulation ops: reshape, permute, slicing, concat, gather.
//!
//! All op outputs are stored in standard (row-major contiguous) layout so
//! that downstream reshapes never need a copy.

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use super::{Tape, Var};
use crate::scalar::Scalar;

/// Copies into standard layout (no-op clone when already standard) and
/// reshapes. Element count must match.
pub(crate) fn reshaped<S: Scalar>(arr: &ArrayD<S>, shape: &[usize]) -> ArrayD<S> {
    let owned = if arr.is_standard_layout() {
        arr.clone()
    } else {
        arr.as_standard_layout().to_owned()
    };
    owned
        .into_shape_with_order(IxDyn(shape))
        .unwrap_or_else(|e| panic!("reshape to {shape:?} failed: {e}"))
}

impl<S: Scalar> Tape<S> {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = reshaped(self.value(a), shape);
        self.unary(a, value, move |t, g| {
            vec![(a, reshaped(g, t.value(a).shape()))]
        })
    }

    /// Permutes axes; `axes` is the new order in terms of old axis indices.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let axes_vec = axes.to_vec();
        let value = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(&axes_vec))
            .as_standard_layout()
            .to_owned();
        self.unary(a, value, move |_, g| {
            let mut inverse = vec![0usize; axes_vec.len()];
            for (new_pos, &old_axis) in axes_vec.iter().enumerate() {
                inverse[old_axis] = new_pos;
            }
            let gp = g
                .view()
                .permuted_axes(IxDyn(&inverse))
                .as_standard_layout()
                .to_owned();
            vec![(a, gp)]
        })
    }

    /// Transposes a rank-2 node.
    pub fn transpose2(&mut self, a: Var) -> Var {
        assert_eq!(self.value(a).ndim(), 2, "transpose2 expects rank 2");
        self.permute(a, &[1, 0])
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let end = start + len;
        assert!(
            end <= self.value(a).shape()[axis],
            "narrow: {}..{} out of bounds for axis {} with len {}",
            start,
            end,
            axis,
            self.value(a).shape()[axis]
        );
        let value = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..end))
            .as_standard_layout()
            .to_owned();
        self.unary(a, value, move |t, g| {
            let mut full = ArrayD::zeros(t.value(a).raw_dim());
            full.slice_axis_mut(Axis(axis), Slice::from(start..end))
                .assign(g);
            vec![(a, full)]
        })
    }

    /// Concatenates along `axis`. Backward splits the gradient back.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views)
            .expect("concat: incompatible shapes")
            .as_standard_layout()
            .to_owned();
        let parts_vec = parts.to_vec();
        let needs = parts.iter().any(|&p| self.needs_grad(p));
        if !needs {
            return self.push_node(value, false, None);
        }
        let backward = move |t: &Tape<S>, g: &ArrayD<S>| {
            let mut out = Vec::with_capacity(parts_vec.len());
            let mut offset = 0usize;
            for &p in &parts_vec {
                let len = t.value(p).shape()[axis];
                let piece = g
                    .slice_axis(Axis(axis), Slice::from(offset..offset + len))
                    .as_standard_layout()
                    .to_owned();
                out.push((p, piece));
                offset += len;
            }
            out
        };
        self.push_node(value, true, Some(Box::new(backward)))
    }

    /// Gathers sub-arrays along `axis` at the given indices, in order.
    /// Duplicate indices are allowed; backward scatter-adds.
    pub fn index_select(&mut self, a: Var, axis: usize, indices: Vec<usize>) -> Var {
        let dim = self.value(a).shape()[axis];
        assert!(
            indices.iter().all(|&i| i < dim),
            "index_select: index out of bounds ({} axis len {dim})",
            indices.iter().max().copied().unwrap_or(0)
        );
        let value = self
            .value(a)
            .select(Axis(axis), &indices)
            .as_standard_layout()
            .to_owned();
        self.unary(a, value, move |t, g| {
            let mut full: ArrayD<S> = ArrayD::zeros(t.value(a).raw_dim());
            for (pos, &src) in indices.iter().enumerate() {
                let gi = g.index_axis(Axis(axis), pos);
                let mut slot = full.index_axis_mut(Axis(axis), src);
                slot += &gi;
            }
            vec![(a, full)]
        })
    }
}
