//! Central finite-difference gradient checks.

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Max over coordinates of `|analytic - central difference| / max(1, |analytic|)`
/// for a scalar function of one tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), step)
}

/// Same as [`finite_diff_check`] for a function of several tensors.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {}", step)));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let r = f(&mut g, &vs)?;
        Ok(g.scalar(r))
    };

    let mut g = Graph::new();
    let vs: Vec<Var> = xs.iter().map(|t| g.variable(t.clone())).collect();
    let root = f(&mut g, &vs)?;
    g.backward(root)?;
    let analytic: Vec<Tensor> = vs.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = xs.to_vec();
    for t in 0..xs.len() {
        for j in 0..xs[t].len() {
            let orig = xs[t].data()[j];
            work[t].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[t].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[t].data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * step);
            let a = analytic[t].data()[j];
            worst = worst.max((a - fd).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
