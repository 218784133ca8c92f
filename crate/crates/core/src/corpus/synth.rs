use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::rnn::Segment;
use crate::scalar::Scalar;

use super::{CorpusError, Dataset};

/// Synthetic "spoken word" corpus.
///
/// Each word type is a smooth trajectory through `anchors` random points.
/// Instances warp it in time, add frame noise and add a constant
/// per-instance offset (a stand-in for speaker variation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_types: usize,
    pub instances_per_type: usize,
    /// Base feature dimension; tripled when `deltas` is set.
    pub dim: usize,
    pub deltas: bool,
    pub min_len: usize,
    pub max_len: usize,
    pub anchors: usize,
    /// Time-warp strength in `[0, 1)`: spread of instance lengths and of
    /// the durations of the stretches between anchors.
    pub warp: f64,
    /// Standard deviation of the i.i.d. frame noise.
    pub noise: f64,
    /// Standard deviation of the per-instance constant offset.
    pub speaker_offset: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_types: 50,
            instances_per_type: 20,
            dim: 13,
            deltas: false,
            min_len: 20,
            max_len: 60,
            anchors: 5,
            warp: 0.8,
            noise: 1.5,
            speaker_offset: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidConfig(m.to_string()));
        if self.num_types < 2 {
            return bad("num_types must be at least 2");
        }
        if self.instances_per_type < 2 {
            return bad("instances_per_type must be at least 2");
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return bad("need 2 <= min_len <= max_len");
        }
        if self.dim == 0 || self.anchors < 2 {
            return bad("dim must be positive and anchors at least 2");
        }
        if !(0.0..1.0).contains(&self.warp) || self.noise < 0.0 || self.speaker_offset < 0.0 {
            return bad("warp must be in [0, 1); noise and speaker_offset non-negative");
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        if self.deltas {
            3 * self.dim
        } else {
            self.dim
        }
    }
}

/// Linear interpolation of `frames` (row-major `[n, d]`) at fractional index `pos`.
fn interpolate(frames: &[f64], d: usize, pos: f64, out: &mut [f64]) {
    let n = frames.len() / d;
    let lo = (pos.floor() as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    let w = pos - lo as f64;
    for j in 0..d {
        out[j] = (1.0 - w) * frames[lo * d + j] + w * frames[hi * d + j];
    }
}

/// Appends velocity and acceleration (central differences, edges clamped).
fn with_deltas(frames: &[f64], d: usize) -> Vec<f64> {
    let n = frames.len() / d;
    let diff = |x: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for t in 0..n {
            let (prev, next) = (t.saturating_sub(1), (t + 1).min(n - 1));
            for j in 0..d {
                out[t * d + j] = (x[next * d + j] - x[prev * d + j]) / 2.0;
            }
        }
        out
    };
    let vel = diff(frames);
    let acc = diff(&vel);
    let mut out = Vec::with_capacity(3 * frames.len());
    for t in 0..n {
        for src in [frames, &vel, &acc] {
            out.extend_from_slice(&src[t * d..(t + 1) * d]);
        }
    }
    out
}

/// Deterministic per seed. Segment ids are `t{type}_i{instance}`, labels
/// `w{type}`, ordered type-major.
pub fn generate_synthetic_corpus<S: Scalar>(config: &SynthConfig) -> Result<Dataset<S>, CorpusError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.dim;
    let mut segments = Vec::with_capacity(config.num_types * config.instances_per_type);
    for ty in 0..config.num_types {
        let proto_len = rng.random_range(config.min_len..=config.max_len);
        let anchors: Vec<f64> = (0..config.anchors * d).map(|_| rng.sample(StandardNormal)).collect();
        let mut proto = vec![0.0; proto_len * d];
        for t in 0..proto_len {
            let pos = t as f64 * (config.anchors - 1) as f64 / (proto_len - 1) as f64;
            interpolate(&anchors, d, pos, &mut proto[t * d..(t + 1) * d]);
        }
        for inst in 0..config.instances_per_type {
            let scale = 1.0 + config.warp * (rng.random::<f64>() - 0.5);
            let len = ((proto_len as f64 * scale).round() as usize).max(2);
            // Each stretch between anchors gets its own duration, like phones
            // spoken at different rates; `bounds` are the instance times at
            // which the anchors are reached.
            let spans = config.anchors - 1;
            let rates: Vec<f64> = (0..spans).map(|_| (config.warp * rng.sample::<f64, _>(StandardNormal)).exp()).collect();
            let total: f64 = rates.iter().sum();
            let mut bounds = vec![0.0; spans + 1];
            for i in 0..spans {
                bounds[i + 1] = bounds[i] + rates[i] / total * (len - 1) as f64;
            }
            let offset: Vec<f64> = (0..d).map(|_| config.speaker_offset * rng.sample::<f64, _>(StandardNormal)).collect();
            let per_span = (proto_len - 1) as f64 / spans as f64;
            let mut frames = vec![0.0; len * d];
            for t in 0..len {
                let x = t as f64;
                let i = (0..spans).find(|&i| x <= bounds[i + 1]).unwrap_or(spans - 1);
                let frac = if bounds[i + 1] > bounds[i] { ((x - bounds[i]) / (bounds[i + 1] - bounds[i])).clamp(0.0, 1.0) } else { 1.0 };
                let pos = ((i as f64 + frac) * per_span).min((proto_len - 1) as f64);
                interpolate(&proto, d, pos, &mut frames[t * d..(t + 1) * d]);
                for j in 0..d {
                    frames[t * d + j] += offset[j] + config.noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let (frames, width) = if config.deltas { (with_deltas(&frames, d), 3 * d) } else { (frames, d) };
            let data = frames.into_iter().map(S::lit).collect();
            let tensor = Tensor::new(vec![len, width], data).expect("shape matches data");
            segments.push(Segment::new(format!("t{ty:03}_i{inst:03}"), Some(format!("w{ty:03}")), tensor)?);
        }
    }
    Dataset::new(segments)
}

/// Splits each label's instances, in dataset order, into train / validation
/// / test: the last `test` go to test, the `val` before them to
/// validation, the rest to train. Unlabelled segments go to train.
pub fn split_per_type<S: Scalar>(
    dataset: &Dataset<S>,
    val: usize,
    test: usize,
) -> Result<(Dataset<S>, Dataset<S>, Dataset<S>), CorpusError> {
    let mut counts = std::collections::BTreeMap::new();
    for s in &dataset.segments {
        if let Some(l) = &s.label {
            *counts.entry(l.clone()).or_insert(0usize) += 1;
        }
    }
    if let Some((l, c)) = counts.iter().find(|(_, &c)| c <= val + test) {
        return Err(CorpusError::InvalidConfig(format!("label {l} has {c} instances, need more than {}", val + test)));
    }
    let mut seen = std::collections::BTreeMap::new();
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for s in &dataset.segments {
        let Some(l) = &s.label else {
            tr.push(s.clone());
            continue;
        };
        let k = seen.entry(l.clone()).or_insert(0usize);
        let total = counts[l];
        if *k >= total - test {
            te.push(s.clone());
        } else if *k >= total - test - val {
            va.push(s.clone());
        } else {
            tr.push(s.clone());
        }
        *k += 1;
    }
    let make = |segments| Dataset { dim: dataset.dim, segments };
    Ok((make(tr), make(va), make(te)))
}
