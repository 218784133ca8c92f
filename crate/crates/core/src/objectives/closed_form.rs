use crate::autodiff::{TapeError, Tensor};
use crate::rnn::Posterior;
use crate::scalar::Scalar;

use super::AnnealSchedule;

/// Exact log-density of `x` under a spherical Gaussian centred at `x_hat`:
/// `−Σ(x − x̂)² / (2σ²) − (n/2) ln(2πσ²)` with `n` the element count.
pub fn gaussian_log_likelihood<S: Scalar>(x: &Tensor<S>, x_hat: &Tensor<S>, sigma2: S) -> Result<S, TapeError> {
    if x.shape() != x_hat.shape() {
        return Err(TapeError::ShapeMismatch { op: "gaussian_log_likelihood", left: x.shape().to_vec(), right: x_hat.shape().to_vec() });
    }
    let sq = x.data().iter().zip(x_hat.data()).fold(S::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    let n = S::lit(x.len() as f64);
    let two = S::lit(2.0);
    Ok(-sq / (two * sigma2) - n / two * (two * S::lit(std::f64::consts::PI) * sigma2).ln())
}

/// `KL(N(μ, diag(exp(lv))) || N(0, I)) = ½ Σ (μ² + exp(lv) − 1 − lv)`.
pub fn kl_diag_gaussian_std_normal<S: Scalar>(posterior: &Posterior<S>) -> S {
    let half = S::lit(0.5);
    posterior
        .mean
        .iter()
        .zip(&posterior.log_variance)
        .fold(S::zero(), |acc, (&m, &lv)| acc + half * (m * m + lv.exp() - S::one() - lv))
}

/// Sigmoid annealing weight `1 / (1 + exp(−k (t − s0)))`.
pub fn anneal_weight(t: f64, schedule: &AnnealSchedule) -> f64 {
    1.0 / (1.0 + (-schedule.slope * (t - schedule.midpoint)).exp())
}
