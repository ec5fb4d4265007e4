//! Central finite-difference gradient checking.
//!
//! The builder closure records a scalar-valued computation on a fresh tape.
//! Analytic gradients come from [`Tape::backward`]; numeric gradients come
//! from re-running the forward pass with each input element perturbed by
//! ±eps. The two must agree elementwise within a relative tolerance.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::TensorBase;

pub type BuildFn<'a, S> = dyn Fn(&mut Tape<S>, &[Var]) -> Result<Var> + 'a;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

fn eval<S: Scalar>(build: &BuildFn<'_, S>, inputs: &[TensorBase<S>]) -> Result<S> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
    let loss = build(&mut tape, &vars)?;
    Ok(tape.scalar_value(loss))
}

/// Gradients of the built scalar w.r.t. every input, from one backward pass.
pub fn analytic_grads<S: Scalar>(
    build: &BuildFn<'_, S>,
    inputs: &[TensorBase<S>],
) -> Result<Vec<Vec<S>>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![S::zero(); t.numel()]))
        .collect())
}

/// Central-difference gradients, one forward pair per input element.
pub fn numeric_grads<S: Scalar>(
    build: &BuildFn<'_, S>,
    inputs: &[TensorBase<S>],
    eps: S,
) -> Result<Vec<Vec<S>>> {
    let two = S::from_f64c(2.0);
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![S::zero(); inputs[i].numel()];
        for j in 0..inputs[i].numel() {
            let mut probe: Vec<TensorBase<S>> = inputs.to_vec();
            probe[i].data_mut()[j] += eps;
            let plus = eval(build, &probe)?;
            probe[i].data_mut()[j] -= two * eps;
            let minus = eval(build, &probe)?;
            g[j] = (plus - minus) / (two * eps);
        }
        grads.push(g);
    }
    Ok(grads)
}

pub fn compare_grads<S: Scalar>(analytic: &[Vec<S>], numeric: &[Vec<S>]) -> GradReport {
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    for (i, (ga, gn)) in analytic.iter().zip(numeric).enumerate() {
        for (j, (&a, &n)) in ga.iter().zip(gn).enumerate() {
            let a = a.to_f64().unwrap();
            let n = n.to_f64().unwrap();
            let denom = a.abs().max(n.abs()).max(1.0);
            let rel = (a - n).abs() / denom;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (i, j);
                report.analytic_at_worst = a;
                report.numeric_at_worst = n;
            }
        }
    }
    report
}

/// Run the full check. The caller asserts on `max_rel_err`.
pub fn check_gradient<S: Scalar>(
    build: &BuildFn<'_, S>,
    inputs: &[TensorBase<S>],
    eps: S,
) -> Result<GradReport> {
    let analytic = analytic_grads(build, inputs)?;
    let numeric = numeric_grads(build, inputs, eps)?;
    Ok(compare_grads(&analytic, &numeric))
}

/// Default probe step for f64 checks.
pub const DEFAULT_EPS: f64 = 1e-6;
/// Relative tolerance used by the verification suite.
pub const DEFAULT_TOL: f64 = 1e-4;
