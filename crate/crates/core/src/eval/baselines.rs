use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::rnn::Segment;
use crate::scalar::Scalar;

use super::cosine_distance;

/// `n` frames sampled at equally spaced positions of `[0, T − 1]` with
/// linear interpolation, flattened time-major to `n · D` values.
pub fn downsample_embedding<S: Scalar>(segment: &Segment<S>, n: usize) -> Vec<S> {
    let (t, d) = (segment.len(), segment.dim());
    let mut out = Vec::with_capacity(n * d);
    for k in 0..n {
        let pos = if n == 1 { 0.0 } else { (k * (t - 1)) as f64 / (n - 1) as f64 };
        let lo = (pos.floor() as usize).min(t - 1);
        let hi = (lo + 1).min(t - 1);
        let w = S::lit(pos - lo as f64);
        let (a, b) = (segment.frame(lo), segment.frame(hi));
        out.extend(a.iter().zip(b).map(|(&x, &y)| (S::one() - w) * x + w * y));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FrameDistance {
    #[default]
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DtwOptions {
    pub distance: FrameDistance,
    /// Divide the path cost by the number of aligned frame pairs.
    pub normalize: bool,
}

impl Default for DtwOptions {
    fn default() -> Self {
        Self { distance: FrameDistance::Cosine, normalize: true }
    }
}

/// Cosine-distance, length-normalized DTW.
pub fn dtw_cost<S: Scalar>(a: &Segment<S>, b: &Segment<S>) -> S {
    dtw_cost_with(a, b, DtwOptions::default())
}

/// Dynamic time warping with steps `(1,0)`, `(0,1)`, `(1,1)` from the first
/// frame pair to the last. The path of least total cost is chosen, the
/// shortest such path on exact ties; with `normalize` its cost is divided
/// by its number of cells.
pub fn dtw_cost_with<S: Scalar>(a: &Segment<S>, b: &Segment<S>, options: DtwOptions) -> S {
    let (n, m) = (a.len(), b.len());
    let frame_cost = |i: usize, j: usize| match options.distance {
        FrameDistance::Cosine => cosine_distance(a.frame(i), b.frame(j)),
        FrameDistance::Euclidean => a.frame(i).iter().zip(b.frame(j)).map(|(&x, &y)| (x - y) * (x - y)).fold(S::zero(), |s, v| s + v).sqrt(),
    };
    // (total cost, path cells) per cell, row-major.
    let mut best: Vec<(S, usize)> = vec![(S::zero(), 0); n * m];
    for i in 0..n {
        for j in 0..m {
            let c = frame_cost(i, j);
            let prev = [(i > 0 && j > 0).then(|| best[(i - 1) * m + j - 1]), (i > 0).then(|| best[(i - 1) * m + j]), (j > 0).then(|| best[i * m + j - 1])]
                .into_iter()
                .flatten()
                .reduce(|x, y| if y.0 < x.0 || (y.0 == x.0 && y.1 < x.1) { y } else { x });
            best[i * m + j] = match prev {
                Some((cost, len)) => (cost + c, len + 1),
                None => (c, 1),
            };
        }
    }
    let (cost, len) = best[n * m - 1];
    if options.normalize {
        cost / S::lit(len as f64)
    } else {
        cost
    }
}

/// Standard-normal vectors, one per segment: the chance-level baseline.
pub fn random_embeddings<S: Scalar>(count: usize, dim: usize, seed: u64) -> Vec<Vec<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| (0..dim).map(|_| S::lit(rng.sample(StandardNormal))).collect()).collect()
}
