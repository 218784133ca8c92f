use crate::autodiff::Tensor;
use crate::scalar::Scalar;

use super::TrainError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam moment estimates, one pair per named parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<S> {
    pub names: Vec<String>,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    /// Updates applied so far.
    pub step: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new<'a>(params: impl IntoIterator<Item = (String, &'a Tensor<S>)>) -> Self
    where
        S: 'a,
    {
        let (names, shapes): (Vec<String>, Vec<Vec<usize>>) = params.into_iter().map(|(n, t)| (n, t.shape().to_vec())).unzip();
        let m: Vec<Tensor<S>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        Self { names, v: m.clone(), m, step: 0 }
    }
}

/// One bias-corrected Adam update, `p ← p − lr · m̂ / (√v̂ + ε)`.
///
/// Nothing is modified if any gradient is non-finite.
pub fn adam_step<S: Scalar>(params: &mut [&mut Tensor<S>], grads: &[Tensor<S>], state: &mut OptimizerState<S>, lr: S) -> Result<(), TrainError> {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    assert_eq!(params.len(), state.m.len(), "optimizer state matches parameters");
    for ((g, p), name) in grads.iter().zip(params.iter()).zip(&state.names) {
        assert_eq!(g.shape(), p.shape(), "gradient shape for {name}");
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient { name: name.clone(), step: state.step + 1 });
        }
    }
    state.step += 1;
    let (b1, b2, eps) = (S::lit(BETA1), S::lit(BETA2), S::lit(EPSILON));
    let t = state.step.min(i32::MAX as u64) as i32;
    let c1 = S::one() - b1.powi(t);
    let c2 = S::one() - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, &gj) in m.iter_mut().zip(g) {
            *mj = b1 * *mj + (S::one() - b1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, &gj) in v.iter_mut().zip(g) {
            *vj = b2 * *vj + (S::one() - b2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for ((pj, &mj), &vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            *pj -= lr * (mj / c1) / ((vj / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: S) -> S {
    let norm = grads.iter().map(|g| g.sum_of_squares()).fold(S::zero(), |a, b| a + b).sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}
