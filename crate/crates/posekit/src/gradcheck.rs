//! Finite-difference verification of tape gradients.
//!
//! Rebuilds the same scalar-valued graph twice per perturbed element and
//! compares the central difference against the analytic gradient from
//! [`Tape::backward`]. Used throughout the test suites; `f64` only, since
//! `f32` cancellation noise would drown the comparison.

use ndarray::ArrayD;

use crate::nn::{Fwd, ParamSet};
use crate::tensor::{Tape, Var};

/// Outcome of one gradient comparison over all inputs.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error seen across all input elements.
    pub max_rel_err: f64,
    /// `(input index, flat element index)` of the worst element.
    pub worst_at: Option<(usize, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with a floor so near-zero gradients compare absolutely.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs())
}

/// Checks the gradients of `build` (a scalar-valued graph) with respect to
/// every element of every input, using central differences with a step of
/// `eps * max(1, |x|)`.
///
/// `build` must construct the same function each call; it receives the
/// inputs as tape nodes in the given order.
pub fn check_gradients<F>(build: F, inputs: &[ArrayD<f64>], eps: f64) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let root = build(&mut tape, &vars);
    assert_eq!(
        tape.value(root).len(),
        1,
        "gradcheck: build must return a one-element node"
    );
    let grads = tape.backward(root);
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(x.raw_dim()))
        })
        .collect();
    drop(tape);

    let eval = |ins: &[ArrayD<f64>]| -> f64 {
        let mut t = Tape::<f64>::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let r = build(&mut t, &vs);
        t.scalar_value(r)
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_at: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        for (flat, &x0) in input.iter().enumerate() {
            let h = eps * 1.0f64.max(x0.abs());
            set_flat(&mut work[ii], flat, x0 + h);
            let fp = eval(&work);
            set_flat(&mut work[ii], flat, x0 - h);
            let fm = eval(&work);
            set_flat(&mut work[ii], flat, x0);
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ii]
                .as_slice()
                .map(|s| s[flat])
                .unwrap_or_else(|| *analytic[ii].iter().nth(flat).unwrap());
            let err = rel_err(a, numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_at = Some((ii, flat));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    report
}

/// Panics with a readable message when gradients disagree beyond `tol`.
pub fn assert_gradients_close<F>(build: F, inputs: &[ArrayD<f64>], eps: f64, tol: f64)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let report = check_gradients(build, inputs, eps);
    assert!(
        report.within(tol),
        "gradient mismatch: max rel err {:.3e} at {:?} (analytic {:.6e}, numeric {:.6e})",
        report.max_rel_err,
        report.worst_at,
        report.worst_analytic,
        report.worst_numeric
    );
}

/// Checks the gradients of `build` with respect to every element of every
/// parameter in `params`. The closure receives a fresh forward pass whose
/// parameters bind lazily through [`Fwd::p`] and must return a one-element
/// node. The numeric side perturbs the stored parameter values in place (and
/// restores them), so `build` must be a pure function of those values.
pub fn check_param_gradients<F>(params: &mut ParamSet<f64>, build: F, eps: f64) -> GradCheckReport
where
    F: Fn(&mut Fwd<f64>) -> Var,
{
    let analytic: Vec<Option<ArrayD<f64>>> = {
        let mut f = Fwd::new(params);
        let root = build(&mut f);
        assert_eq!(
            f.tape.value(root).len(),
            1,
            "gradcheck: build must return a one-element node"
        );
        let mut grads = f.tape.backward(root);
        f.param_grads(&mut grads)
    };

    let eval = |ps: &ParamSet<f64>| -> f64 {
        let mut f = Fwd::new(ps);
        let r = build(&mut f);
        f.tape.scalar_value(r)
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_at: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for pi in 0..params.entries().len() {
        let elems = params.entries()[pi].value.len();
        for flat in 0..elems {
            let x0 = *params.entries()[pi]
                .value
                .iter()
                .nth(flat)
                .expect("flat in range");
            let h = eps * 1.0f64.max(x0.abs());
            set_flat(&mut params.entries_mut()[pi].value, flat, x0 + h);
            let fp = eval(params);
            set_flat(&mut params.entries_mut()[pi].value, flat, x0 - h);
            let fm = eval(params);
            set_flat(&mut params.entries_mut()[pi].value, flat, x0);
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[pi]
                .as_ref()
                .map(|g| *g.iter().nth(flat).expect("flat in range"))
                .unwrap_or(0.0);
            let err = rel_err(a, numeric);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_at = Some((pi, flat));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    report
}

/// Panics with the parameter name when parameter gradients disagree beyond `tol`.
pub fn assert_param_gradients_close<F>(params: &mut ParamSet<f64>, build: F, eps: f64, tol: f64)
where
    F: Fn(&mut Fwd<f64>) -> Var,
{
    let report = check_param_gradients(params, build, eps);
    let where_ = report
        .worst_at
        .map(|(pi, flat)| format!("{}[{flat}]", params.entries()[pi].name))
        .unwrap_or_else(|| "<none>".to_string());
    assert!(
        report.within(tol),
        "parameter gradient mismatch: max rel err {:.3e} at {where_} (analytic {:.6e}, numeric {:.6e})",
        report.max_rel_err,
        report.worst_analytic,
        report.worst_numeric
    );
}

fn set_flat(arr: &mut ArrayD<f64>, flat: usize, v: f64) {
    if let Some(s) = arr.as_slice_mut() {
        s[flat] = v;
    } else {
        *arr.iter_mut().nth(flat).expect("flat index in range") = v;
    }
}
