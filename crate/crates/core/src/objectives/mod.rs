//! Training objectives.
//!
//! The variational objectives (`j_vae`, `j_cvae`, `j_mcvae`) are quantities
//! to maximize; `ae_loss`, `cae_loss` and `triplet_loss` are losses to
//! minimize. All of them are built on a [`Tape`] so they can be
//! differentiated, and all randomness enters through an explicit noise
//! tensor.
//!
//! Noise layout: for a batch of `B` encoded segments and `K` samples,
//! `noise` is `[K * B, latent_dim]` and row `k * B + b` is the `k`-th
//! standard-normal draw for segment `b`. For pair objectives the encoded
//! batch is `[x1_0 .. x1_{N-1}, x2_0 .. x2_{N-1}]`, so `B = 2N`.

mod closed_form;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, TapeError, Tensor, Var};
use crate::rnn::{decode_batch, encode_batch, frame_squared_error, sample_latent_batch, EncoderVars, ModelVars, Segment};
use crate::scalar::Scalar;

pub use closed_form::{anneal_weight, gaussian_log_likelihood, kl_diag_gaussian_std_normal};

/// Sigmoid KL-weight schedule `1 / (1 + exp(-k (t - s0)))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    /// Slope `k`.
    pub slope: f64,
    /// Midpoint step `s0`.
    pub midpoint: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self { slope: 0.02, midpoint: 1000.0 }
    }
}

impl AnnealSchedule {
    pub fn weight(&self, step: u64) -> f64 {
        anneal_weight(step as f64, self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Variance of the spherical Gaussian likelihood.
    pub sigma2: f64,
    /// Weight on the KL term (the cap when annealing).
    pub kl_weight: f64,
    /// Latent samples per segment.
    pub samples: usize,
    /// Triplet hinge margin.
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { sigma2: 0.01, kl_weight: 0.001, samples: 5, margin: 0.4 }
    }
}

/// A scalar objective on the tape plus detached diagnostics.
#[derive(Debug, Clone)]
pub struct Objective<S> {
    pub value: Var,
    /// Mean KL divergence per encoded segment (zero for deterministic models).
    pub mean_kl: S,
    /// Mean reconstruction term per reconstruction (log-likelihood for the
    /// variational objectives, squared error for the autoencoders).
    pub reconstruction: S,
    /// For `j_mcvae`, the chosen sample index per encoded segment.
    pub selected: Option<Vec<usize>>,
}

/// `log p(x | z)` per row for a spherical Gaussian with variance `sigma2`,
/// including the normalization constant.
pub fn log_likelihood_rows<S: Scalar>(tape: &mut Tape<S>, recon: Var, targets: &[&Tensor<S>], sigma2: S) -> Result<Var, TapeError> {
    let sq = frame_squared_error(tape, recon, targets)?;
    let scaled = tape.scale(sq, -S::one() / (S::lit(2.0) * sigma2));
    let log_norm = (S::lit(2.0 * std::f64::consts::PI) * sigma2).ln();
    let consts = Tensor::from_fn(&[targets.len()], |r| -S::lit(targets[r].len() as f64 / 2.0) * log_norm);
    let consts = tape.constant(consts);
    tape.add(scaled, consts)
}

/// Closed-form `KL(q || N(0, I))` per row of `(mean, log_variance)`.
pub fn kl_rows<S: Scalar>(tape: &mut Tape<S>, mean: Var, log_variance: Var) -> Result<Var, TapeError> {
    let latent = tape.shape(mean)[1];
    let m2 = tape.square(mean);
    let var = tape.exp(log_variance);
    let a = tape.add(m2, var)?;
    let b = tape.sub(a, log_variance)?;
    let s = tape.sum_axis(b, 1)?;
    let s = tape.add_scalar(s, -S::lit(latent as f64));
    Ok(tape.scale(s, S::lit(0.5)))
}

fn check_noise<S: Scalar>(noise: &Tensor<S>, samples: usize, batch: usize, latent: usize) -> Result<(), TapeError> {
    if samples == 0 || noise.shape() != [samples * batch, latent] {
        return Err(TapeError::ShapeMismatch { op: "noise", left: vec![samples * batch, latent], right: noise.shape().to_vec() });
    }
    Ok(())
}

fn mean_value<S: Scalar>(tape: &Tape<S>, v: Var) -> S {
    let t = tape.value(v);
    t.sum() / S::lit(t.len() as f64)
}

enum SampleReduction {
    Mean,
    Max,
}

/// Shared body of the three variational objectives.
///
/// `targets[b]` is what samples of segment `b`'s posterior must
/// reconstruct. The per-segment reconstruction term is reduced over the
/// `K` samples, the weighted KL is subtracted, and the result is summed
/// and divided by `per`.
#[allow(clippy::too_many_arguments)]
fn variational<S: Scalar>(
    tape: &mut Tape<S>,
    model: &ModelVars,
    inputs: &[&Segment<S>],
    targets: &[&Segment<S>],
    samples: usize,
    kl_weight: S,
    sigma2: S,
    noise: &Tensor<S>,
    reduction: SampleReduction,
    per: usize,
) -> Result<Objective<S>, TapeError> {
    let batch = inputs.len();
    check_noise(noise, samples, batch, model.encoder.latent_dim)?;
    let (mean, log_variance) = encode_batch(tape, &model.encoder, inputs)?;
    let z = sample_latent_batch(tape, mean, log_variance, noise)?;
    let row_targets: Vec<&Tensor<S>> = (0..samples * batch).map(|r| targets[r % batch].frames()).collect();
    let lengths: Vec<usize> = row_targets.iter().map(|t| t.rows()).collect();
    let recon = decode_batch(tape, &model.decoder, z, &lengths)?;
    let ll = log_likelihood_rows(tape, recon, &row_targets, sigma2)?;
    let reconstruction = mean_value(tape, ll);
    let by_sample = tape.reshape(ll, &[samples, batch])?;
    let (reduced, selected) = match reduction {
        SampleReduction::Mean => {
            let s = tape.sum_axis(by_sample, 0)?;
            (tape.scale(s, S::one() / S::lit(samples as f64)), None)
        }
        SampleReduction::Max => {
            let (m, picked) = tape.max_axis(by_sample, 0)?;
            (m, Some(picked))
        }
    };
    let kl = kl_rows(tape, mean, log_variance)?;
    let mean_kl = mean_value(tape, kl);
    let weighted = tape.scale(kl, kl_weight);
    let per_segment = tape.sub(reduced, weighted)?;
    let total = tape.sum(per_segment);
    let value = tape.scale(total, S::one() / S::lit(per as f64));
    Ok(Objective { value, mean_kl, reconstruction, selected })
}

/// Monte-Carlo ELBO averaged over the batch:
/// `mean_b [ mean_k log p(x_b | z_b^k) − kl_weight · KL(q(z | x_b) || p(z)) ]`.
pub fn j_vae<S: Scalar>(
    tape: &mut Tape<S>,
    model: &ModelVars,
    batch: &[&Segment<S>],
    samples: usize,
    kl_weight: S,
    sigma2: S,
    noise: &Tensor<S>,
) -> Result<Objective<S>, TapeError> {
    if batch.is_empty() {
        return Err(TapeError::EmptyInput { op: "j_vae" });
    }
    variational(tape, model, batch, batch, samples, kl_weight, sigma2, noise, SampleReduction::Mean, batch.len())
}

fn pair_layout<'a, S>(pairs: &[(&'a Segment<S>, &'a Segment<S>)]) -> (Vec<&'a Segment<S>>, Vec<&'a Segment<S>>) {
    let inputs: Vec<&Segment<S>> = pairs.iter().map(|p| p.0).chain(pairs.iter().map(|p| p.1)).collect();
    let targets: Vec<&Segment<S>> = pairs.iter().map(|p| p.1).chain(pairs.iter().map(|p| p.0)).collect();
    (inputs, targets)
}

/// Correspondence objective: samples from `q(z | x1)` reconstruct `x2`
/// (averaged over `K`) and vice versa, minus both weighted KL terms,
/// averaged over pairs. Cross reconstructions use the target's length.
pub fn j_cvae<S: Scalar>(
    tape: &mut Tape<S>,
    model: &ModelVars,
    pairs: &[(&Segment<S>, &Segment<S>)],
    samples: usize,
    kl_weight: S,
    sigma2: S,
    noise: &Tensor<S>,
) -> Result<Objective<S>, TapeError> {
    if pairs.is_empty() {
        return Err(TapeError::EmptyInput { op: "j_cvae" });
    }
    let (inputs, targets) = pair_layout(pairs);
    variational(tape, model, &inputs, &targets, samples, kl_weight, sigma2, noise, SampleReduction::Mean, pairs.len())
}

/// Maximal-sampling correspondence objective: as [`j_cvae`] but each
/// direction keeps only its best sample, `max_k log p(x2 | z1^k)`.
/// Gradient reaches only the selected samples (lowest index on ties).
pub fn j_mcvae<S: Scalar>(
    tape: &mut Tape<S>,
    model: &ModelVars,
    pairs: &[(&Segment<S>, &Segment<S>)],
    samples: usize,
    kl_weight: S,
    sigma2: S,
    noise: &Tensor<S>,
) -> Result<Objective<S>, TapeError> {
    if pairs.is_empty() {
        return Err(TapeError::EmptyInput { op: "j_mcvae" });
    }
    let (inputs, targets) = pair_layout(pairs);
    variational(tape, model, &inputs, &targets, samples, kl_weight, sigma2, noise, SampleReduction::Max, pairs.len())
}

/// Squared reconstruction error of `targets[b]` from the posterior mean of
/// `inputs[b]`, summed over frames and dimensions, averaged over rows.
fn deterministic_reconstruction<S: Scalar>(
    tape: &mut Tape<S>,
    model: &ModelVars,
    inputs: &[&Segment<S>],
    targets: &[&Segment<S>],
) -> Result<Objective<S>, TapeError> {
    let (mean, _) = encode_batch(tape, &model.encoder, inputs)?;
    let frames: Vec<&Tensor<S>> = targets.iter().map(|s| s.frames()).collect();
    let lengths: Vec<usize> = frames.iter().map(|t| t.rows()).collect();
    let recon = decode_batch(tape, &model.decoder, mean, &lengths)?;
    let sq = frame_squared_error(tape, recon, &frames)?;
    let value = tape.mean(sq);
    let reconstruction = tape.value(value).item();
    Ok(Objective { value, mean_kl: S::zero(), reconstruction, selected: None })
}

/// Autoencoder loss `(1/N) Σ ‖x − x̂‖²` with `z` = posterior mean.
pub fn ae_loss<S: Scalar>(tape: &mut Tape<S>, model: &ModelVars, batch: &[&Segment<S>]) -> Result<Objective<S>, TapeError> {
    if batch.is_empty() {
        return Err(TapeError::EmptyInput { op: "ae_loss" });
    }
    deterministic_reconstruction(tape, model, batch, batch)
}

/// Correspondence autoencoder loss `‖x2 − x̂1‖²`, with both directions of
/// every pair included and averaged.
pub fn cae_loss<S: Scalar>(tape: &mut Tape<S>, model: &ModelVars, pairs: &[(&Segment<S>, &Segment<S>)]) -> Result<Objective<S>, TapeError> {
    if pairs.is_empty() {
        return Err(TapeError::EmptyInput { op: "cae_loss" });
    }
    let (inputs, targets) = pair_layout(pairs);
    deterministic_reconstruction(tape, model, &inputs, &targets)
}

/// Row-wise cosine distance `1 − a·b / (‖a‖ ‖b‖)` for `[B, n]` inputs.
pub fn cosine_distance_rows<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var, TapeError> {
    let ab = tape.mul(a, b)?;
    let dot = tape.sum_axis(ab, 1)?;
    let a2 = tape.square(a);
    let na = tape.sum_axis(a2, 1)?;
    let b2 = tape.square(b);
    let nb = tape.sum_axis(b2, 1)?;
    let prod = tape.mul(na, nb)?;
    let norm = tape.sqrt(prod);
    let cos = tape.div(dot, norm)?;
    let neg = tape.neg(cos);
    Ok(tape.add_scalar(neg, S::one()))
}

/// Triplet hinge `max(0, m + d(a, s) − d(a, d))` on encoder means,
/// averaged over triplets `(anchor, same, different)`.
pub fn triplet_loss<S: Scalar>(
    tape: &mut Tape<S>,
    encoder: &EncoderVars,
    triplets: &[(&Segment<S>, &Segment<S>, &Segment<S>)],
    margin: S,
) -> Result<Objective<S>, TapeError> {
    let n = triplets.len();
    if n == 0 {
        return Err(TapeError::EmptyInput { op: "triplet_loss" });
    }
    let all: Vec<&Segment<S>> =
        triplets.iter().map(|t| t.0).chain(triplets.iter().map(|t| t.1)).chain(triplets.iter().map(|t| t.2)).collect();
    let (mean, _) = encode_batch(tape, encoder, &all)?;
    let anchor = tape.slice(mean, 0, 0, n)?;
    let same = tape.slice(mean, 0, n, n)?;
    let diff = tape.slice(mean, 0, 2 * n, n)?;
    let d_same = cosine_distance_rows(tape, anchor, same)?;
    let d_diff = cosine_distance_rows(tape, anchor, diff)?;
    let gap = tape.sub(d_same, d_diff)?;
    let shifted = tape.add_scalar(gap, margin);
    let zero = tape.constant(Tensor::zeros(&[n]));
    let hinge = tape.maximum(shifted, zero)?;
    let value = tape.mean(hinge);
    let reconstruction = tape.value(value).item();
    Ok(Objective { value, mean_kl: S::zero(), reconstruction, selected: None })
}
