//! Same-different evaluation and the non-learned baselines.
//!
//! Every unordered pair of test segments is scored by a distance; pairs of
//! the same word type are positives. Average precision is the mean, over
//! positives, of the precision at each positive's rank when pairs are
//! sorted by ascending distance (stable, so tied pairs keep input order).

mod baselines;

use std::fmt::Write as _;

use log::warn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::TapeError;
use crate::rnn::{encode_all, EncoderParams, Segment};
use crate::scalar::Scalar;

pub use baselines::{downsample_embedding, dtw_cost, dtw_cost_with, random_embeddings, DtwOptions, FrameDistance};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no same-type pairs: average precision is undefined")]
    NoPositives,
    #[error("need at least two segments, got {0}")]
    TooFewSegments(usize),
    #[error("non-finite distance for pair ({0}, {1})")]
    NonFinite(String, String),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPairOutcome<S> {
    pub first: String,
    pub second: String,
    pub distance: S,
    pub same_type: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint<S> {
    pub threshold: S,
    pub precision: S,
    pub recall: S,
}

/// Precision and recall at each distinct distance threshold, strictest
/// first, plus the average precision in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve<S> {
    pub points: Vec<PrPoint<S>>,
    pub average_precision: S,
}

impl<S: Scalar> PrCurve<S> {
    /// `threshold TAB precision TAB recall` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for p in &self.points {
            let _ = writeln!(out, "{}\t{}\t{}", p.threshold, p.precision, p.recall);
        }
        out
    }
}

/// `1 − a·b / (‖a‖ ‖b‖)`. A zero vector has no direction; its distance to
/// anything is 1.
pub fn cosine_distance<S: Scalar>(a: &[S], b: &[S]) -> S {
    let (mut dot, mut na, mut nb) = (S::zero(), S::zero(), S::zero());
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == S::zero() || nb == S::zero() {
        warn!("cosine distance with a zero-norm vector; using 1");
        return S::one();
    }
    S::one() - dot / (na * nb).sqrt()
}

pub fn same_different_ap<S: Scalar>(outcomes: &[EvalPairOutcome<S>]) -> Result<PrCurve<S>, EvalError> {
    if let Some(o) = outcomes.iter().find(|o| !o.distance.is_finite()) {
        return Err(EvalError::NonFinite(o.first.clone(), o.second.clone()));
    }
    let positives = outcomes.iter().filter(|o| o.same_type).count();
    if positives == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut order: Vec<usize> = (0..outcomes.len()).collect();
    order.sort_by(|&i, &j| outcomes[i].distance.partial_cmp(&outcomes[j].distance).expect("finite distances"));
    let total = S::lit(positives as f64);
    let mut hits = 0usize;
    let mut ap = S::zero();
    let mut points = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        let o = &outcomes[i];
        if o.same_type {
            hits += 1;
            ap += S::lit(hits as f64) / S::lit((rank + 1) as f64);
        }
        let last_of_threshold = order.get(rank + 1).is_none_or(|&j| outcomes[j].distance != o.distance);
        if last_of_threshold {
            points.push(PrPoint {
                threshold: o.distance,
                precision: S::lit(hits as f64) / S::lit((rank + 1) as f64),
                recall: S::lit(hits as f64) / total,
            });
        }
    }
    Ok(PrCurve { points, average_precision: ap / total })
}

/// Which pairs to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairSelection {
    #[default]
    All,
    /// A uniform sample of at most this many unordered pairs (without
    /// replacement), drawn with the given seed.
    Sample { max_pairs: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport<S> {
    /// Average precision in percent.
    pub ap_percent: S,
    pub num_pairs: usize,
    pub num_positives: usize,
    pub curve: PrCurve<S>,
}

impl<S: Scalar> EvalReport<S> {
    pub fn summary(&self) -> String {
        format!("ap_percent {:.1}\nnum_pairs {}\nnum_positives {}\n", self.ap_percent.as_f64(), self.num_pairs, self.num_positives)
    }
}

/// The unordered pair `(i, j)`, `i < j`, at position `k` of the row-major
/// enumeration over `n` items.
fn pair_at(k: usize, n: usize) -> (usize, usize) {
    let (mut i, mut k) = (0, k);
    while k >= n - 1 - i {
        k -= n - 1 - i;
        i += 1;
    }
    (i, i + 1 + k)
}

/// Scores unordered pairs of `segments` with `distance(i, j)`.
pub fn evaluate_with<S: Scalar>(
    segments: &[&Segment<S>],
    selection: PairSelection,
    mut distance: impl FnMut(usize, usize) -> S,
) -> Result<EvalReport<S>, EvalError> {
    let n = segments.len();
    if n < 2 {
        return Err(EvalError::TooFewSegments(n));
    }
    let total = n * (n - 1) / 2;
    let chosen: Vec<(usize, usize)> = match selection {
        PairSelection::Sample { max_pairs, seed } if max_pairs < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picks = sample(&mut rng, total, max_pairs).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|k| pair_at(k, n)).collect()
        }
        _ => (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect(),
    };
    let outcomes: Vec<EvalPairOutcome<S>> = chosen
        .into_iter()
        .map(|(i, j)| {
            let (a, b) = (segments[i], segments[j]);
            EvalPairOutcome {
                first: a.id.clone(),
                second: b.id.clone(),
                distance: distance(i, j),
                same_type: a.label.is_some() && a.label == b.label,
            }
        })
        .collect();
    let curve = same_different_ap(&outcomes)?;
    Ok(EvalReport {
        ap_percent: curve.average_precision * S::lit(100.0),
        num_pairs: outcomes.len(),
        num_positives: outcomes.iter().filter(|o| o.same_type).count(),
        curve,
    })
}

/// Cosine-distance evaluation of fixed embeddings, one per segment.
pub fn evaluate_embeddings<S: Scalar>(
    segments: &[&Segment<S>],
    embeddings: &[Vec<S>],
    selection: PairSelection,
) -> Result<EvalReport<S>, EvalError> {
    evaluate_with(segments, selection, |i, j| cosine_distance(&embeddings[i], &embeddings[j]))
}

/// The embedding of a segment: its posterior mean.
pub fn embed<S: Scalar>(encoder: &EncoderParams<S>, segment: &Segment<S>) -> Result<Vec<S>, TapeError> {
    Ok(embed_all(encoder, &[segment])?.remove(0))
}

pub fn embed_all<S: Scalar>(encoder: &EncoderParams<S>, segments: &[&Segment<S>]) -> Result<Vec<Vec<S>>, TapeError> {
    Ok(encode_all(encoder, segments, 64)?.into_iter().map(|p| p.mean).collect())
}

/// Embeds every segment once and evaluates all (or sampled) pairs.
pub fn evaluate_model<S: Scalar>(
    encoder: &EncoderParams<S>,
    segments: &[&Segment<S>],
    selection: PairSelection,
) -> Result<EvalReport<S>, EvalError> {
    if segments.len() < 2 {
        return Err(EvalError::TooFewSegments(segments.len()));
    }
    let embeddings = embed_all(encoder, segments)?;
    evaluate_embeddings(segments, &embeddings, selection)
}
