//! Central finite-difference gradient checking.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Compares the autodiff gradient of `f` at `point` with central finite
/// differences of step `h`. Returns `max_i |g_auto - g_fd| / max(1, |g_fd|)`.
///
/// `f` receives a fresh graph and the parameter leaf and must return a
/// one-element node.
pub fn finite_diff_check<F>(f: F, point: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let auto = autodiff_gradient(&f, point)?;
    let fd = numeric_gradient(&f, point, h)?;
    Ok(max_relative_error(auto.data(), &fd))
}

pub fn autodiff_gradient<T: Real, F>(f: &F, point: &Tensor<T>) -> Result<Tensor<T>>
where
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let p = g.param(point.clone());
    let out = f(&mut g, p)?;
    let grads = g.backward(out)?;
    Ok(grads.get_or_zeros(p, point))
}

pub fn numeric_gradient<F>(f: &F, point: &Tensor<f64>, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let p = g.constant(t);
        let out = f(&mut g, p)?;
        Ok(g.value(out).item())
    };
    (0..point.len())
        .map(|i| {
            let mut plus = point.clone();
            plus.data_mut()[i] += h;
            let mut minus = point.clone();
            minus.data_mut()[i] -= h;
            Ok((eval(plus)? - eval(minus)?) / (2.0 * h))
        })
        .collect()
}

pub fn max_relative_error(auto: &[f64], fd: &[f64]) -> f64 {
    auto.iter()
        .zip(fd)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}
