//! Central finite-difference verification of analytic gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn eval_scalar<F>(f: &F, x: Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x);
    let out = f(&mut g, xv)?;
    let t = g.value(out);
    if t.numel() != 1 {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar map, got dims {}",
            t.dims()
        )));
    }
    let v = t.data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric(format!("map evaluated to {v}")));
    }
    Ok(v)
}

/// Analytic gradient of the scalar map `f` at `x`, via [`Graph::backward`].
pub fn analytic_gradient<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    Ok(g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.dims())))
}

/// Max over coordinates of `|g_analytic - g_numeric| / max(1, |g_numeric|)`,
/// where `g_numeric` is the central difference with half-width `step`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::param(
            "finite_difference_check",
            format!("step must be positive, got {step}"),
        ));
    }
    let analytic = analytic_gradient(&f, x)?;
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval_scalar(&f, plus)? - eval_scalar(&f, minus)?) / (2.0 * step);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
