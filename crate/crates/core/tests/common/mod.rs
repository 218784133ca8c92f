#![allow(dead_code)]

use awe::autodiff::Tensor;
use awe::eval::EvalPairOutcome;
use awe::rnn::{Model, ModelConfig, Segment};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// hidden 8, latent 4, D 4.
pub fn toy_config() -> ModelConfig {
    ModelConfig { feature_dim: 4, hidden_dim: 8, latent_dim: 4, layers: 2, decoder_bidirectional: true }
}

pub fn toy_model(seed: u64) -> Model<f64> {
    Model::init(&toy_config(), &mut rng(seed))
}

pub fn uniform_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

pub fn normal_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.sample(StandardNormal))
}

pub fn segment(r: &mut ChaCha8Rng, id: &str, len: usize, dim: usize) -> Segment<f64> {
    Segment::new(id, None, uniform_tensor(r, &[len, dim], -1.0, 1.0)).unwrap()
}

/// Random segments of length 2..=6 in D=4.
pub fn toy_segments(r: &mut ChaCha8Rng, n: usize) -> Vec<Segment<f64>> {
    (0..n)
        .map(|i| {
            let len = r.random_range(2..=6);
            segment(r, &format!("s{i}"), len, 4)
        })
        .collect()
}

pub fn assert_close(a: f64, b: f64, tol: f64) {
    let scale = a.abs().max(b.abs()).max(1.0);
    assert!((a - b).abs() <= tol * scale, "{a} vs {b} (tol {tol})");
}

pub fn outcome(d: f64, same: bool) -> EvalPairOutcome<f64> {
    EvalPairOutcome { first: String::new(), second: String::new(), distance: d, same_type: same }
}

/// Area under the precision-recall step curve, sweeping every distinct
/// threshold: Σ (R_k − R_{k−1}) · P_k.
pub fn sweep_ap(outcomes: &[EvalPairOutcome<f64>]) -> f64 {
    let mut thresholds: Vec<f64> = outcomes.iter().map(|o| o.distance).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let positives = outcomes.iter().filter(|o| o.same_type).count() as f64;
    let (mut area, mut prev_recall) = (0.0, 0.0);
    for th in thresholds {
        let accepted: Vec<&EvalPairOutcome<f64>> = outcomes.iter().filter(|o| o.distance <= th).collect();
        let hits = accepted.iter().filter(|o| o.same_type).count() as f64;
        let (precision, recall) = (hits / accepted.len() as f64, hits / positives);
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    area
}

/// Minimum mean cost over every monotone path from (0,0) to (n−1,m−1),
/// shortest on ties, by explicit enumeration.
pub fn enumerate_dtw(cost: &[Vec<f64>], normalize: bool) -> f64 {
    fn walk(cost: &[Vec<f64>], i: usize, j: usize, acc: f64, len: usize, best: &mut (f64, usize)) {
        let (acc, len) = (acc + cost[i][j], len + 1);
        let (n, m) = (cost.len(), cost[0].len());
        if i == n - 1 && j == m - 1 {
            if acc < best.0 || (acc == best.0 && len < best.1) {
                *best = (acc, len);
            }
            return;
        }
        if i + 1 < n {
            walk(cost, i + 1, j, acc, len, best);
        }
        if j + 1 < m {
            walk(cost, i, j + 1, acc, len, best);
        }
        if i + 1 < n && j + 1 < m {
            walk(cost, i + 1, j + 1, acc, len, best);
        }
    }
    let mut best = (f64::INFINITY, 0);
    walk(cost, 0, 0, 0.0, 0, &mut best);
    if normalize {
        best.0 / best.1 as f64
    } else {
        best.0
    }
}
