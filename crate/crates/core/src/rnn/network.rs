use crate::autodiff::{Tape, TapeError, Tensor, Var};
use crate::scalar::Scalar;

use super::gru::{run_direction, StepInputs};
use super::params::{DecoderParams, DecoderVars, EncoderParams, EncoderVars};
use super::{Posterior, Segment};

/// Row layout of a batch of sequences packed by time step.
///
/// Rows are ordered by decreasing length (ties keep batch order). Step `t`
/// holds one row for each of the `active(t)` longest sequences, and the
/// steps follow one another, so a batch of lengths `L_b` packs into
/// `Σ L_b` rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packing {
    /// Batch row at each sorted position.
    order: Vec<usize>,
    /// Sorted position of each batch row.
    position: Vec<usize>,
    lengths: Vec<usize>,
    active: Vec<usize>,
    offsets: Vec<usize>,
}

impl Packing {
    pub fn new(lengths: &[usize]) -> Self {
        let mut order: Vec<usize> = (0..lengths.len()).collect();
        order.sort_by_key(|&b| std::cmp::Reverse(lengths[b]));
        let mut position = vec![0; lengths.len()];
        for (p, &b) in order.iter().enumerate() {
            position[b] = p;
        }
        let steps = lengths.iter().copied().max().unwrap_or(0);
        let active: Vec<usize> = (0..steps).map(|t| lengths.iter().filter(|&&len| len > t).count()).collect();
        let mut offsets = Vec::with_capacity(steps);
        let mut total = 0;
        for &n in &active {
            offsets.push(total);
            total += n;
        }
        Self { order, position, lengths: lengths.to_vec(), active, offsets }
    }

    /// Total packed rows.
    pub fn rows(&self) -> usize {
        self.lengths.iter().sum()
    }

    pub fn steps(&self) -> usize {
        self.active.len()
    }

    /// Sequences still running at step `t`.
    pub fn active(&self, t: usize) -> usize {
        self.active[t]
    }

    /// Packed row of batch row `b` at step `t < lengths[b]`.
    pub fn index(&self, b: usize, t: usize) -> usize {
        debug_assert!(t < self.lengths[b]);
        self.offsets[t] + self.position[b]
    }

    /// Packs `[L_b, D]` sequences into `[Σ L_b, D]`.
    pub fn pack<S: Scalar>(&self, seqs: &[&Tensor<S>], dim: usize) -> Tensor<S> {
        let mut data = vec![S::zero(); self.rows() * dim];
        for (b, seq) in seqs.iter().enumerate() {
            for t in 0..seq.rows() {
                let dst = self.index(b, t) * dim;
                data[dst..dst + dim].copy_from_slice(seq.row(t));
            }
        }
        Tensor::from_parts_unchecked(vec![self.rows(), dim], data)
    }

    /// The frames of batch row `b` from a packed `[Σ L_b, D]` tensor.
    pub fn unpack<S: Scalar>(&self, packed: &Tensor<S>, b: usize) -> Tensor<S> {
        let dim = packed.cols();
        let mut data = Vec::with_capacity(self.lengths[b] * dim);
        for t in 0..self.lengths[b] {
            data.extend_from_slice(packed.row(self.index(b, t)));
        }
        Tensor::from_parts_unchecked(vec![self.lengths[b], dim], data)
    }
}

fn stack_states<S: Scalar>(tape: &mut Tape<S>, per_direction: &[Vec<Var>]) -> Result<Var, TapeError> {
    let stacked: Vec<Var> = per_direction.iter().map(|states| tape.concat(states, 0)).collect::<Result<_, _>>()?;
    if stacked.len() == 1 {
        Ok(stacked[0])
    } else {
        tape.concat(&stacked, 1)
    }
}

/// Encodes a batch of segments, returning `(mean, log_variance)`, each
/// `[B, latent_dim]`.
///
/// Both directions of every layer run over each segment's own frames;
/// layer `l + 1` reads the per-step concatenation of layer `l`'s forward
/// and backward states. The last layer's final forward state and final
/// backward state are concatenated and projected; the first half of the
/// projection is the mean.
pub fn encode_batch<S: Scalar>(tape: &mut Tape<S>, enc: &EncoderVars, segments: &[&Segment<S>]) -> Result<(Var, Var), TapeError> {
    let batch = segments.len();
    if batch == 0 {
        return Err(TapeError::EmptyInput { op: "encode" });
    }
    let feature_dim = tape.shape(enc.layers[0][0].w_input)[0];
    if let Some(bad) = segments.iter().find(|s| s.dim() != feature_dim) {
        return Err(TapeError::ShapeMismatch { op: "encode", left: vec![feature_dim], right: bad.frames().shape().to_vec() });
    }
    let lengths: Vec<usize> = segments.iter().map(|s| s.len()).collect();
    let packing = Packing::new(&lengths);
    let steps = packing.steps();
    let frames: Vec<&Tensor<S>> = segments.iter().map(|s| s.frames()).collect();
    let mut input = tape.constant(packing.pack(&frames, feature_dim));
    let mut finals = Vec::new();
    for (l, dirs) in enc.layers.iter().enumerate() {
        let mut outputs = Vec::with_capacity(dirs.len());
        for (d, cell) in dirs.iter().enumerate() {
            let proj = cell.project_input(tape, input)?;
            let xs: Vec<Var> = (0..steps).map(|t| tape.slice(proj, 0, packing.offsets[t], packing.active[t])).collect::<Result<_, _>>()?;
            outputs.push(run_direction(tape, cell, StepInputs::PerStep(&xs), &packing.active, d == 1)?);
        }
        if l + 1 < enc.layers.len() {
            input = stack_states(tape, &outputs)?;
        } else {
            // Forward: each row's state at its own last frame. Backward: the
            // state after reading frame 0, where every row is active.
            let forward = tape.concat(&outputs[0], 0)?;
            let last: Vec<usize> = (0..batch).map(|b| packing.index(b, lengths[b] - 1)).collect();
            let first: Vec<usize> = (0..batch).map(|b| packing.index(b, 0)).collect();
            finals = vec![tape.gather_rows(forward, &last)?, tape.gather_rows(outputs[1][0], &first)?];
        }
    }
    let joined = tape.concat(&finals, 1)?;
    let proj = tape.matmul(joined, enc.proj_weight)?;
    let proj = tape.add_row(proj, enc.proj_bias)?;
    let mean = tape.slice(proj, 1, 0, enc.latent_dim)?;
    let log_variance = tape.slice(proj, 1, enc.latent_dim, enc.latent_dim)?;
    Ok((mean, log_variance))
}

/// Decodes latent rows `z: [R, latent_dim]` to frame means, row `r` at
/// length `lengths[r]`.
///
/// `z` is the decoder input at every step; states start at zero. The
/// result is `[Σ lengths, D]` in the layout of [`Packing::new`]`(lengths)`.
pub fn decode_batch<S: Scalar>(tape: &mut Tape<S>, dec: &DecoderVars, z: Var, lengths: &[usize]) -> Result<Var, TapeError> {
    let rows = tape.shape(z)[0];
    if lengths.len() != rows || lengths.contains(&0) {
        return Err(TapeError::ShapeMismatch { op: "decode", left: tape.shape(z).to_vec(), right: lengths.to_vec() });
    }
    let packing = Packing::new(lengths);
    let steps = packing.steps();
    let sorted = if packing.order.iter().enumerate().all(|(p, &b)| p == b) { z } else { tape.gather_rows(z, &packing.order)? };
    let mut stacked: Option<Var> = None;
    for dirs in &dec.layers {
        let mut outputs = Vec::with_capacity(dirs.len());
        for (d, cell) in dirs.iter().enumerate() {
            let states = match stacked {
                None => {
                    let xw = cell.project_input(tape, sorted)?;
                    run_direction(tape, cell, StepInputs::Shared(xw), &packing.active, d == 1)?
                }
                Some(input) => {
                    let proj = cell.project_input(tape, input)?;
                    let xs: Vec<Var> = (0..steps).map(|t| tape.slice(proj, 0, packing.offsets[t], packing.active[t])).collect::<Result<_, _>>()?;
                    run_direction(tape, cell, StepInputs::PerStep(&xs), &packing.active, d == 1)?
                }
            };
            outputs.push(states);
        }
        stacked = Some(stack_states(tape, &outputs)?);
    }
    let hidden_states = stacked.expect("decoder has at least one layer");
    let out = tape.matmul(hidden_states, dec.out_weight)?;
    tape.add_row(out, dec.out_bias)
}

/// Per-row summed squared error between a packed reconstruction (see
/// [`decode_batch`]) and the targets it was decoded for. Returns `[R]`.
pub fn frame_squared_error<S: Scalar>(tape: &mut Tape<S>, recon: Var, targets: &[&Tensor<S>]) -> Result<Var, TapeError> {
    let lengths: Vec<usize> = targets.iter().map(|t| t.rows()).collect();
    let packing = Packing::new(&lengths);
    let dim = tape.shape(recon)[1];
    if targets.is_empty() || tape.shape(recon)[0] != packing.rows() || targets.iter().any(|t| t.cols() != dim) {
        return Err(TapeError::ShapeMismatch {
            op: "frame_squared_error",
            left: tape.shape(recon).to_vec(),
            right: targets.first().map(|t| t.shape().to_vec()).unwrap_or_default(),
        });
    }
    let target = tape.constant(packing.pack(targets, dim));
    let diff = tape.sub(recon, target)?;
    let sq = tape.square(diff);
    let mut groups = vec![0; packing.rows() * dim];
    for (b, &len) in lengths.iter().enumerate() {
        for t in 0..len {
            let row = packing.index(b, t);
            groups[row * dim..(row + 1) * dim].fill(b);
        }
    }
    tape.sum_groups(sq, &groups, targets.len())
}

/// Reparameterized samples `z = mean + exp(½ log_variance) ⊙ ε`.
///
/// `noise` is `[K * B, latent_dim]`, sample-major: row `k * B + b` is the
/// `k`-th draw for batch row `b`. Returns `z` in the same layout.
pub fn sample_latent_batch<S: Scalar>(tape: &mut Tape<S>, mean: Var, log_variance: Var, noise: &Tensor<S>) -> Result<Var, TapeError> {
    let (batch, latent) = (tape.shape(mean)[0], tape.shape(mean)[1]);
    if noise.shape().len() != 2 || noise.cols() != latent || noise.rows() % batch != 0 || noise.rows() == 0 {
        return Err(TapeError::ShapeMismatch { op: "sample_latent", left: tape.shape(mean).to_vec(), right: noise.shape().to_vec() });
    }
    let k = noise.rows() / batch;
    let half = tape.scale(log_variance, S::lit(0.5));
    let std = tape.exp(half);
    let (mean_rep, std_rep) = if k == 1 {
        (mean, std)
    } else {
        (tape.concat(&vec![mean; k], 0)?, tape.concat(&vec![std; k], 0)?)
    };
    let eps = tape.constant(noise.clone());
    let scaled = tape.mul(std_rep, eps)?;
    tape.add(mean_rep, scaled)
}

/// Posterior for one segment.
pub fn encode<S: Scalar>(params: &EncoderParams<S>, segment: &Segment<S>) -> Result<Posterior<S>, TapeError> {
    Ok(encode_all(params, &[segment], 1)?.remove(0))
}

/// Posteriors for many segments, encoded `chunk` at a time.
pub fn encode_all<S: Scalar>(params: &EncoderParams<S>, segments: &[&Segment<S>], chunk: usize) -> Result<Vec<Posterior<S>>, TapeError> {
    let mut out = Vec::with_capacity(segments.len());
    for group in segments.chunks(chunk.max(1)) {
        let mut tape = Tape::new();
        let enc = params.bind(&mut tape, false);
        let (mean, lv) = encode_batch(&mut tape, &enc, group)?;
        let (m, v) = (tape.value(mean), tape.value(lv));
        for r in 0..group.len() {
            out.push(Posterior { mean: m.row(r).to_vec(), log_variance: v.row(r).to_vec() });
        }
    }
    Ok(out)
}

/// `K` reparameterized samples from one posterior; `noise` is `[K, latent_dim]`.
pub fn sample_latent<S: Scalar>(posterior: &Posterior<S>, noise: &Tensor<S>) -> Result<Tensor<S>, TapeError> {
    let l = posterior.mean.len();
    if noise.shape().len() != 2 || noise.cols() != l {
        return Err(TapeError::ShapeMismatch { op: "sample_latent", left: vec![l], right: noise.shape().to_vec() });
    }
    let mut out = noise.clone();
    for row in out.data_mut().chunks_mut(l) {
        for ((z, &m), &lv) in row.iter_mut().zip(&posterior.mean).zip(&posterior.log_variance) {
            *z = m + (S::lit(0.5) * lv).exp() * *z;
        }
    }
    Ok(out)
}

/// Frame means `[length, D]` decoded from a single latent vector.
pub fn decode<S: Scalar>(params: &DecoderParams<S>, z: &[S], length: usize) -> Result<Tensor<S>, TapeError> {
    let mut tape = Tape::new();
    let dec = params.bind(&mut tape, false);
    let zv = tape.constant(Tensor::new(vec![1, z.len()], z.to_vec())?);
    let out = decode_batch(&mut tape, &dec, zv, &[length])?;
    Ok(tape.value(out).clone())
}
