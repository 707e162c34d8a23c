//! Reductions, broadcasting and softmax.

use ndarray::{ArrayD, Axis};

use super::{Tape, Var};
use crate::scalar::Scalar;

impl<S: Scalar> Tape<S> {
    /// Sum of all elements, shape `[1]`.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let value = ArrayD::from_elem(ndarray::IxDyn(&[1]), total);
        self.unary(a, value, move |t, g| {
            let shape = t.value(a).raw_dim();
            vec![(a, ArrayD::from_elem(shape, g[0]))]
        })
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        assert!(n > 0, "mean_all of empty tensor");
        let s = self.sum_all(a);
        self.scale(s, S::one() / S::of(n as f64))
    }

    /// Sums over one axis. With `keepdim` the axis stays with length 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Var {
        let reduced = self.value(a).sum_axis(Axis(axis));
        let value = if keepdim {
            reduced.insert_axis(Axis(axis))
        } else {
            reduced
        };
        self.unary(a, value, move |t, g| {
            let shape = t.value(a).raw_dim();
            let expanded = if keepdim {
                g.clone()
            } else {
                g.clone().insert_axis(Axis(axis))
            };
            let full = expanded
                .broadcast(shape.clone())
                .expect("sum_axis backward broadcast")
                .to_owned();
            vec![(a, full)]
        })
    }

    /// Mean over one axis. With `keepdim` the axis stays with length 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Var {
        let n = self.value(a).shape()[axis];
        assert!(n > 0, "mean_axis over empty axis");
        let s = self.sum_axis(a, axis, keepdim);
        self.scale(s, S::one() / S::of(n as f64))
    }

    /// Broadcasts to a larger shape following standard broadcasting rules
    /// (missing leading axes and length-1 axes expand). The backward pass
    /// sums gradients over the expanded axes.
    pub fn broadcast_to(&mut self, a: Var, target: &[usize]) -> Var {
        if self.value(a).shape() == target {
            return a;
        }
        let value = self
            .value(a)
            .broadcast(ndarray::IxDyn(target))
            .unwrap_or_else(|| {
                panic!(
                    "broadcast_to: cannot broadcast {:?} to {:?}",
                    self.value(a).shape(),
                    target
                )
            })
            .to_owned();
        self.unary(a, value, move |t, g| {
            vec![(a, reduce_to_shape(g, t.value(a).shape()))]
        })
    }

    /// Softmax over the last axis, computed stably per lane.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let last = Axis(value.ndim() - 1);
        for mut lane in value.lanes_mut(last) {
            let max = lane.iter().cloned().fold(S::neg_infinity(), S::max);
            lane.mapv_inplace(|v| (v - max).exp());
            let sum = lane.sum();
            lane.mapv_inplace(|v| v / sum);
        }
        let out = self.next_id();
        self.unary(a, value, move |t, g| {
            let y = t.value(out);
            let gy = g * y;
            let axis = Axis(y.ndim() - 1);
            let dot = gy.sum_axis(axis).insert_axis(axis);
            let dotb = dot.broadcast(y.raw_dim()).expect("softmax backward");
            let gx = y * &(g - &dotb);
            vec![(a, gx)]
        })
    }
}

/// Sums `g` down to `shape`, undoing a broadcast.
fn reduce_to_shape<S: Scalar>(g: &ArrayD<S>, shape: &[usize]) -> ArrayD<S> {
    let extra = g.ndim() - shape.len();
    let mut acc = g.clone();
    for _ in 0..extra {
        acc = acc.sum_axis(Axis(0));
    }
    for (ax, &dim) in shape.iter().enumerate() {
        if dim == 1 && acc.shape()[ax] != 1 {
            acc = acc.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{arr1, arr2};

    #[test]
    fn softmax_rows_sum_to_one_and_match_direct_eval() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(arr2(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]).into_dyn());
        let y = t.softmax_last(a);
        let v = t.value(y);
        for row in v.rows() {
            assert_relative_eq!(row.sum(), 1.0, max_relative = 1e-12);
        }
        let z: f64 = (1.0f64).exp() + (2.0f64).exp() + (3.0f64).exp();
        assert_relative_eq!(v[[0, 0]], 1.0f64.exp() / z, max_relative = 1e-12);
        assert_relative_eq!(v[[1, 1]], 1.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn broadcast_backward_sums_expanded_axes() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(arr2(&[[1.0], [2.0]]).into_dyn()); // (2,1)
        let b = t.broadcast_to(a, &[2, 3]);
        let s = t.sum_all(b);
        let grads = t.backward(s);
        assert_eq!(grads.get(a).unwrap(), &arr2(&[[3.0], [3.0]]).into_dyn());
    }

    #[test]
    fn sum_axis_keepdim_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let k = t.sum_axis(a, 1, true);
        assert_eq!(t.value(k).shape(), &[2, 1]);
        let nk = t.sum_axis(a, 1, false);
        assert_eq!(t.value(nk).shape(), &[2]);
        assert_eq!(t.value(nk), &arr1(&[3.0, 7.0]).into_dyn());
    }

    #[test]
    fn mean_axis_backward_divides_by_len() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(arr1(&[1.0, 5.0, 9.0]).into_dyn());
        let m = t.mean_axis(a, 0, false);
        let s = t.sum_all(m);
        let grads = t.backward(s);
        for &g in grads.get(a).unwrap() {
            assert_relative_eq!(g, 1.0 / 3.0, max_relative = 1e-12);
        }
    }
}
