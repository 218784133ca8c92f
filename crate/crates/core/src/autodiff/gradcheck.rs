use thiserror::Error;

use crate::scalar::Scalar;

use super::{Tape, TapeError, Tensor, Var};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("step size must be positive")]
    InvalidStep,
    #[error("function is not finite at parameter {param}, coordinate {index} ({probe})")]
    NonFinite { param: usize, index: usize, probe: &'static str },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over all coordinates. Gradients smaller than
    /// the roundoff floor of the difference quotient are compared against
    /// that floor instead of their own magnitude.
    pub max_error: f64,
    /// `(parameter, flat index)` where `max_error` occurred.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
    pub passed: bool,
}

/// Compares tape gradients of `f` against central differences.
///
/// `f` receives a fresh tape and one handle per parameter and must return
/// a scalar. It is evaluated once with differentiable parameters and twice
/// per coordinate with constant, perturbed copies, so it must be
/// deterministic.
pub fn finite_difference_check<S, F>(mut f: F, params: &[Tensor<S>], eps: S, tol: S) -> Result<GradCheckReport, GradCheckError>
where
    S: Scalar,
    F: FnMut(&mut Tape<S>, &[Var]) -> Result<Var, TapeError>,
{
    if !(eps > S::zero()) {
        return Err(GradCheckError::InvalidStep);
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    if !tape.value(root).item().is_finite() {
        return Err(GradCheckError::NonFinite { param: 0, index: 0, probe: "unperturbed" });
    }
    let f0 = tape.value(root).item();
    tape.backward(root)?;
    let analytic: Vec<Tensor<S>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut probe = |values: &[Tensor<S>]| -> Result<S, TapeError> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|p| t.constant(p.clone())).collect();
        let r = f(&mut t, &vs)?;
        Ok(t.value(r).item())
    };

    let two = S::lit(2.0);
    // Cancellation in f(x+h) - f(x-h) leaves about ε|f|/h of noise in the
    // quotient; below `floor` a relative comparison measures only that.
    let noise = S::epsilon() * f0.abs().max(S::one()) / eps;
    let floor = eps.max(S::lit(10.0) * noise / tol);
    let mut work: Vec<Tensor<S>> = params.to_vec();
    let mut report = GradCheckReport {
        max_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
        passed: true,
    };
    for (pi, p) in params.iter().enumerate() {
        for idx in 0..p.len() {
            let orig = p.data()[idx];
            work[pi].data_mut()[idx] = orig + eps;
            let up = probe(&work)?;
            work[pi].data_mut()[idx] = orig - eps;
            let down = probe(&work)?;
            work[pi].data_mut()[idx] = orig;
            if !up.is_finite() {
                return Err(GradCheckError::NonFinite { param: pi, index: idx, probe: "+eps" });
            }
            if !down.is_finite() {
                return Err(GradCheckError::NonFinite { param: pi, index: idx, probe: "-eps" });
            }
            let numeric = (up - down) / (two * eps);
            let a = analytic[pi].data()[idx];
            let scale = a.abs().max(numeric.abs()).max(floor);
            let err = (a - numeric).abs() / scale;
            report.coordinates += 1;
            if err.as_f64() > report.max_error || report.worst.is_none() {
                report.max_error = err.as_f64();
                report.worst = Some((pi, idx));
                report.analytic_at_worst = a.as_f64();
                report.numeric_at_worst = numeric.as_f64();
            }
        }
    }
    report.passed = report.max_error <= tol.as_f64();
    Ok(report)
}
