//! Elementwise tape operations.
//!
//! Binary ops require identical shapes; broadcast explicitly with
//! [`Tape::broadcast_to`] first. Piecewise ops document their subgradient
//! convention at the kink so training is deterministic.

use ndarray::ArrayD;

use super::{BackwardFn, Tape, Var};
use crate::scalar::Scalar;

impl<S: Scalar> Tape<S> {
    pub(crate) fn binary_same_shape(
        &mut self,
        a: Var,
        b: Var,
        op: &str,
        value: ArrayD<S>,
        backward: impl Fn(&Tape<S>, &ArrayD<S>) -> Vec<(Var, ArrayD<S>)> + 'static,
    ) -> Var {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{op}: shape mismatch"
        );
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let back: Option<BackwardFn<S>> = if needs {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push_node(value, needs, back)
    }

    pub(crate) fn unary(
        &mut self,
        a: Var,
        value: ArrayD<S>,
        backward: impl Fn(&Tape<S>, &ArrayD<S>) -> Vec<(Var, ArrayD<S>)> + 'static,
    ) -> Var {
        let needs = self.needs_grad(a);
        let back: Option<BackwardFn<S>> = if needs {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push_node(value, needs, back)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.binary_same_shape(a, b, "add", value, move |_, g| {
            vec![(a, g.clone()), (b, g.clone())]
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.binary_same_shape(a, b, "sub", value, move |_, g| {
            vec![(a, g.clone()), (b, g.mapv(|v| -v))]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.binary_same_shape(a, b, "mul", value, move |t, g| {
            vec![(a, g * t.value(b)), (b, g * t.value(a))]
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) / self.value(b);
        let out = self.next_id();
        self.binary_same_shape(a, b, "div", value, move |t, g| {
            let vb = t.value(b);
            let da = g / vb;
            // d(a/b)/db = -(a/b)/b, reusing the already computed quotient.
            let db = -(g * t.value(out)) / vb;
            vec![(a, da), (b, db)]
        })
    }

    /// Multiplies by a compile-time-known constant.
    pub fn scale(&mut self, a: Var, k: S) -> Var {
        let value = self.value(a).mapv(|v| v * k);
        self.unary(a, value, move |_, g| vec![(a, g.mapv(|v| v * k))])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -S::one())
    }

    pub fn add_scalar(&mut self, a: Var, k: S) -> Var {
        let value = self.value(a).mapv(|v| v + k);
        self.unary(a, value, move |_, g| vec![(a, g.clone())])
    }

    /// Rectified linear unit. Subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(S::zero()));
        self.unary(a, value, move |t, g| {
            let mask = t.value(a).mapv(|v| if v > S::zero() { S::one() } else { S::zero() });
            vec![(a, g * &mask)]
        })
    }

    /// Numerically stable logistic sigmoid.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(stable_sigmoid);
        let out = self.next_id();
        self.unary(a, value, move |t, g| {
            let y = t.value(out);
            let d = y.mapv(|y| y * (S::one() - y));
            vec![(a, g * &d)]
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.tanh());
        let out = self.next_id();
        self.unary(a, value, move |t, g| {
            let y = t.value(out);
            let d = y.mapv(|y| S::one() - y * y);
            vec![(a, g * &d)]
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.exp());
        let out = self.next_id();
        self.unary(a, value, move |t, g| vec![(a, g * t.value(out))])
    }

    /// Natural logarithm. The input must be strictly positive.
    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.ln());
        self.unary(a, value, move |t, g| vec![(a, g / t.value(a))])
    }

    /// `ln(1 + exp(x))` evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(stable_softplus);
        self.unary(a, value, move |t, g| {
            let d = t.value(a).mapv(stable_sigmoid);
            vec![(a, g * &d)]
        })
    }

    /// Absolute value. Subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.abs());
        self.unary(a, value, move |t, g| {
            let sign = t.value(a).mapv(|v| {
                if v > S::zero() {
                    S::one()
                } else if v < S::zero() {
                    -S::one()
                } else {
                    S::zero()
                }
            });
            vec![(a, g * &sign)]
        })
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v * v);
        self.unary(a, value, move |t, g| {
            let two = S::of(2.0);
            vec![(a, g * &t.value(a).mapv(|v| v * two))]
        })
    }

    /// Elementwise power with a constant exponent. For non-integer `k` the
    /// input must be non-negative.
    pub fn powf(&mut self, a: Var, k: S) -> Var {
        let value = self.value(a).mapv(|v| v.powf(k));
        self.unary(a, value, move |t, g| {
            let d = t.value(a).mapv(|v| k * v.powf(k - S::one()));
            vec![(a, g * &d)]
        })
    }

    /// Clamps into `[lo, hi]`. Gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: S, hi: S) -> Var {
        assert!(lo <= hi, "clamp: lo > hi");
        let value = self.value(a).mapv(|v| v.max(lo).min(hi));
        self.unary(a, value, move |t, g| {
            let mask = t
                .value(a)
                .mapv(|v| if v >= lo && v <= hi { S::one() } else { S::zero() });
            vec![(a, g * &mask)]
        })
    }

    pub fn clamp_min(&mut self, a: Var, lo: S) -> Var {
        self.clamp(a, lo, S::infinity())
    }

    pub fn clamp_max(&mut self, a: Var, hi: S) -> Var {
        self.clamp(a, S::neg_infinity(), hi)
    }

    /// Elementwise maximum. Ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| x.max(y));
        self.binary_same_shape(a, b, "maximum", value, move |t, g| {
            let take_a = ndarray::Zip::from(t.value(a))
                .and(t.value(b))
                .map_collect(|&x, &y| if x >= y { S::one() } else { S::zero() });
            let ga = g * &take_a;
            let gb = g - &ga;
            vec![(a, ga), (b, gb)]
        })
    }

    /// Elementwise minimum. Ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| x.min(y));
        self.binary_same_shape(a, b, "minimum", value, move |t, g| {
            let take_a = ndarray::Zip::from(t.value(a))
                .and(t.value(b))
                .map_collect(|&x, &y| if x <= y { S::one() } else { S::zero() });
            let ga = g * &take_a;
            let gb = g - &ga;
            vec![(a, ga), (b, gb)]
        })
    }
}

pub(crate) fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn stable_softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (S::one() + (-x.abs()).exp()).ln()
}
