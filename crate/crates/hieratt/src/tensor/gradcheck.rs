//! Finite-difference verification of backward rules.
//!
//! The checked computation is a closure that registers the given inputs on
//! a fresh tape and returns a scalar root. Analytic gradients come from
//! one backward sweep; numeric gradients from central differences, two
//! forward evaluations per input element.

use super::tape::{NodeId, Tape};
use super::Tensor;
use crate::error::{Error, Result};

pub type ScalarFn<'a> = dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId> + 'a;

/// Relative error with a floor so near-zero gradients compare on an
/// absolute scale: |a-n| / max(|a|, |n|, 1e-2).
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
}

fn eval(f: &ScalarFn, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t, false)).collect();
    let root = f(&mut tape, &ids)?;
    if tape.data(root).len() != 1 {
        return Err(Error::invalid("grad_check", "function must return a scalar".to_string()));
    }
    Ok(tape.data(root)[0])
}

/// Central differences of the scalar output w.r.t. every input element.
pub fn numeric_gradients(f: &ScalarFn, inputs: &[Tensor], eps: f64) -> Result<Vec<Vec<f64>>> {
    let mut grads = Vec::with_capacity(inputs.len());
    for pi in 0..inputs.len() {
        let mut g = vec![0.0; inputs[pi].numel()];
        for ei in 0..inputs[pi].numel() {
            let mut plus = inputs.to_vec();
            plus[pi].data[ei] += eps;
            let mut minus = inputs.to_vec();
            minus[pi].data[ei] -= eps;
            g[ei] = (eval(f, &plus)? - eval(f, &minus)?) / (2.0 * eps);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Gradients from one tape backward sweep. Inputs the output does not
/// depend on get zeros.
pub fn analytic_gradients(f: &ScalarFn, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t, true)).collect();
    let root = f(&mut tape, &ids)?;
    tape.backward(root)?;
    Ok(ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect())
}

/// Worst relative error between analytic and central-difference gradients
/// over every element of every input. eps must lie in [1e-7, 1e-3].
pub fn grad_check(f: &ScalarFn, inputs: &[Tensor], eps: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid("grad_check", format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let analytic = analytic_gradients(f, inputs)?;
    let numeric = numeric_gradients(f, inputs, eps)?;
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&av, &nv) in a.iter().zip(n) {
            worst = worst.max(relative_error(av, nv));
        }
    }
    Ok(worst)
}
