//! Central finite-difference gradient checking.

use crate::autodiff::tensor::Tensor;
use crate::error::{Result, RmlError};
use crate::scalar::Scalar;

/// A scalar function of a list of parameter tensors with an analytic gradient.
pub trait Objective<T: Scalar> {
    fn loss(&mut self, params: &[Tensor<T>]) -> Result<T>;

    /// Loss together with one gradient tensor per parameter.
    fn loss_and_grad(&mut self, params: &[Tensor<T>]) -> Result<(T, Vec<Tensor<T>>)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
    pub pass: bool,
}

/// Compares the analytic gradient against `(f(x+h) - f(x-h)) / 2h` for
/// every coordinate. Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<T: Scalar, O: Objective<T>>(
    objective: &mut O,
    params: &[Tensor<T>],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let (base, grads) = objective.loss_and_grad(params)?;
    if grads.len() != params.len() {
        return Err(RmlError::Contract(format!(
            "objective returned {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let again = objective.loss(params)?;
    if base.to_f64_lossy().to_bits() != again.to_f64_lossy().to_bits() {
        return Err(RmlError::CheckInvalid(format!(
            "objective is not deterministic: {base} then {again}"
        )));
    }

    let h = T::lit(step);
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
        pass: true,
    };
    for (pi, grad) in grads.iter().enumerate() {
        if grad.shape() != params[pi].shape() {
            return Err(RmlError::shape(
                "grad_check",
                params[pi].shape(),
                grad.shape(),
            ));
        }
        for c in 0..params[pi].len() {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = orig + h;
            let up = objective.loss(&work)?;
            work[pi].data_mut()[c] = orig - h;
            let down = objective.loss(&work)?;
            work[pi].data_mut()[c] = orig;

            let numeric = (up - down).to_f64_lossy() / (2.0 * step);
            let analytic = grad.data()[c].to_f64_lossy();
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            if !rel.is_finite() || rel > report.max_rel_err {
                report.max_rel_err = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = (pi, c);
            }
            report.checked += 1;
        }
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}
