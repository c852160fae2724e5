//! Central-difference gradient checking.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the recorded gradient of `f` at `theta` against central
/// differences with step `eps`.
///
/// `f` receives a fresh graph with `theta` registered as a parameter and
/// must return a scalar loss. The result is
/// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, theta: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let shape = theta.shape().to_vec();

    let mut g = Graph::new();
    let v = g.parameter(Tensor::new(shape.clone(), theta.values().to_vec())?);
    let loss = f(&mut g, v)?;
    g.backward(loss)?;
    let analytic = g
        .grad(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; theta.len()]);

    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.parameter(Tensor::new(shape.clone(), values)?);
        let loss = f(&mut g, v)?;
        Ok(g.scalar_value(loss))
    };

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = theta.values().to_vec();
        plus[i] += eps;
        let mut minus = theta.values().to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
