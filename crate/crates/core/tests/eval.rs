mod common;

use awe::autodiff::Tensor;
use awe::eval::{
    cosine_distance, downsample_embedding, dtw_cost, dtw_cost_with, evaluate_embeddings, evaluate_model, evaluate_with, same_different_ap,
    DtwOptions, EvalError, EvalPairOutcome, FrameDistance, PairSelection,
};
use awe::rnn::{encode, Segment};
use common::{assert_close, enumerate_dtw, outcome, rng, sweep_ap};
use proptest::prelude::*;
use rand::Rng;

fn labelled(id: &str, label: &str, frames: Tensor<f64>) -> Segment<f64> {
    Segment::new(id, Some(label.to_string()), frames).unwrap()
}

fn seq(rows: &[&[f64]]) -> Segment<f64> {
    let d = rows[0].len();
    Segment::new("s", None, Tensor::new(vec![rows.len(), d], rows.concat()).unwrap()).unwrap()
}

#[test]
fn cosine_distance_examples() {
    assert_close(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]), 1.0, 1e-15);
    assert_close(cosine_distance(&[1.0, 2.0], &[2.0, 4.0]), 0.0, 1e-15);
    assert_close(cosine_distance(&[1.0, 0.0], &[-1.0, 0.0]), 2.0, 1e-15);
    assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
}

#[test]
fn ap_examples() {
    let perfect = [outcome(0.1, true), outcome(0.2, true), outcome(0.3, false), outcome(0.9, false)];
    assert_close(same_different_ap(&perfect).unwrap().average_precision, 1.0, 1e-15);
    let single = [outcome(0.4, true), outcome(0.2, false), outcome(0.5, false)];
    let curve = same_different_ap(&single).unwrap();
    assert_close(curve.average_precision, 0.5, 1e-15);
    assert_eq!(curve.points.len(), 3);
    assert_eq!((curve.points[1].precision, curve.points[1].recall), (0.5, 1.0));
    assert!(matches!(same_different_ap(&[outcome(0.1, false)]), Err(EvalError::NoPositives)));
    assert!(matches!(same_different_ap(&[outcome(f64::NAN, true)]), Err(EvalError::NonFinite(..))));
}

#[test]
fn ties_keep_input_order() {
    let first_pos = [outcome(0.3, true), outcome(0.3, false)];
    let first_neg = [outcome(0.3, false), outcome(0.3, true)];
    assert_eq!(same_different_ap(&first_pos).unwrap().average_precision, 1.0);
    assert_eq!(same_different_ap(&first_neg).unwrap().average_precision, 0.5);
    // One threshold, one curve point.
    assert_eq!(same_different_ap(&first_neg).unwrap().points.len(), 1);
}

#[test]
fn reversed_ranking_gives_the_minimum() {
    // Positives last: AP = (1/P) Σ_k k / (N + k).
    let (n, p) = (6usize, 3usize);
    let mut outs: Vec<EvalPairOutcome<f64>> = (0..n).map(|i| outcome(i as f64, false)).collect();
    outs.extend((0..p).map(|i| outcome((n + i) as f64, true)));
    let expected: f64 = (1..=p).map(|k| k as f64 / (n + k) as f64).sum::<f64>() / p as f64;
    assert_close(same_different_ap(&outs).unwrap().average_precision, expected, 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ap_matches_threshold_sweep(n in 1usize..=50, seed in 0u64..10_000) {
        let mut r = rng(seed);
        let mut outs: Vec<EvalPairOutcome<f64>> = (0..n).map(|_| outcome(r.random::<f64>(), r.random_bool(0.3))).collect();
        outs[0].same_type = true;
        let ap = same_different_ap(&outs).unwrap().average_precision;
        prop_assert!((ap - sweep_ap(&outs)).abs() <= 1e-12);
    }

    #[test]
    fn ap_is_invariant_to_monotone_transforms(n in 2usize..40, seed in 0u64..10_000) {
        let mut r = rng(seed);
        let mut outs: Vec<EvalPairOutcome<f64>> = (0..n).map(|_| outcome(r.random::<f64>(), r.random_bool(0.4))).collect();
        outs[0].same_type = true;
        let stretched: Vec<EvalPairOutcome<f64>> = outs.iter().map(|o| outcome(3.0 * o.distance.powi(3) + 1.0, o.same_type)).collect();
        let (a, b) = (same_different_ap(&outs).unwrap(), same_different_ap(&stretched).unwrap());
        prop_assert_eq!(a.average_precision, b.average_precision);
        prop_assert!(a.average_precision > 0.0 && a.average_precision <= 1.0);
    }
}

#[test]
fn two_same_type_segments_score_100() {
    let mut r = rng(1);
    let segs = [labelled("a", "x", common::uniform_tensor(&mut r, &[3, 4], -1.0, 1.0)), labelled("b", "x", common::uniform_tensor(&mut r, &[5, 4], -1.0, 1.0))];
    let refs: Vec<&Segment<f64>> = segs.iter().collect();
    let report = evaluate_model(&common::toy_model(2).encoder, &refs, PairSelection::All).unwrap();
    assert_eq!(report.ap_percent, 100.0);
    assert_eq!((report.num_pairs, report.num_positives), (1, 1));
    assert!(report.summary().starts_with("ap_percent 100.0\n"));
}

#[test]
fn evaluate_model_matches_pairwise_loop() {
    let mut r = rng(3);
    let segs: Vec<Segment<f64>> = (0..20)
        .map(|i| {
            let len = r.random_range(2..=6);
            labelled(&format!("s{i}"), &format!("w{}", i % 4), common::uniform_tensor(&mut r, &[len, 4], -1.0, 1.0))
        })
        .collect();
    let refs: Vec<&Segment<f64>> = segs.iter().collect();
    let encoder = &common::toy_model(4).encoder;
    let report = evaluate_model(encoder, &refs, PairSelection::All).unwrap();
    assert_eq!(report.num_pairs, 190);
    assert_eq!(report.num_positives, 4 * 10);

    let embeddings: Vec<Vec<f64>> = segs.iter().map(|s| encode(encoder, s).unwrap().mean).collect();
    let mut outs = Vec::new();
    for i in 0..20 {
        for j in i + 1..20 {
            outs.push(outcome(cosine_distance(&embeddings[i], &embeddings[j]), segs[i].label == segs[j].label));
        }
    }
    let expected = same_different_ap(&outs).unwrap().average_precision * 100.0;
    assert_close(report.ap_percent, expected, 1e-10);
}

#[test]
fn unlabelled_segments_are_never_positives() {
    let mut r = rng(5);
    let mut segs: Vec<Segment<f64>> = (0..4).map(|i| common::segment(&mut r, &format!("u{i}"), 3, 2)).collect();
    let refs: Vec<&Segment<f64>> = segs.iter().collect();
    let embs: Vec<Vec<f64>> = refs.iter().map(|s| downsample_embedding(s, 2)).collect();
    assert!(matches!(evaluate_embeddings(&refs, &embs, PairSelection::All), Err(EvalError::NoPositives)));
    segs[0].label = Some("a".into());
    segs[1].label = Some("a".into());
    let refs: Vec<&Segment<f64>> = segs.iter().collect();
    assert_eq!(evaluate_embeddings(&refs, &embs, PairSelection::All).unwrap().num_positives, 1);
    assert!(matches!(evaluate_embeddings(&refs[..1], &embs[..1], PairSelection::All), Err(EvalError::TooFewSegments(1))));
}

#[test]
fn pair_sampling_is_deterministic_and_bounded() {
    let mut r = rng(6);
    let segs: Vec<Segment<f64>> =
        (0..30).map(|i| labelled(&format!("s{i}"), &format!("w{}", i % 3), common::uniform_tensor(&mut r, &[4, 2], -1.0, 1.0))).collect();
    let refs: Vec<&Segment<f64>> = segs.iter().collect();
    let dist = |i: usize, j: usize| ((i * 7 + j * 13) % 17) as f64;
    let sel = PairSelection::Sample { max_pairs: 100, seed: 8 };
    let a = evaluate_with(&refs, sel, dist).unwrap();
    let b = evaluate_with(&refs, sel, dist).unwrap();
    assert_eq!(a.num_pairs, 100);
    assert_eq!(a, b);
    let all = evaluate_with(&refs, PairSelection::Sample { max_pairs: 10_000, seed: 8 }, dist).unwrap();
    assert_eq!(all.num_pairs, 435);
}

#[test]
fn downsampling_examples() {
    let s = seq(&[&[0.0, 10.0], &[1.0, 20.0], &[2.0, 30.0]]);
    assert_eq!(downsample_embedding(&s, 3), vec![0.0, 10.0, 1.0, 20.0, 2.0, 30.0]);
    assert_eq!(downsample_embedding(&s, 5), vec![0.0, 10.0, 0.5, 15.0, 1.0, 20.0, 1.5, 25.0, 2.0, 30.0]);
    assert_eq!(downsample_embedding(&s, 1), vec![0.0, 10.0]);
    let one = seq(&[&[4.0]]);
    assert_eq!(downsample_embedding(&one, 3), vec![4.0, 4.0, 4.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    /// Sampling a piecewise-linear sequence reproduces it: every original
    /// frame is hit exactly when `n − 1` is a multiple of `T − 1`.
    #[test]
    fn downsampling_hits_original_frames(len in 2usize..8, mult in 1usize..4, seed in 0u64..1000) {
        let mut r = rng(seed);
        let s = Segment::new("s", None, common::uniform_tensor(&mut r, &[len, 3], -1.0, 1.0)).unwrap();
        let n = (len - 1) * mult + 1;
        let emb = downsample_embedding(&s, n);
        prop_assert_eq!(emb.len(), n * 3);
        for t in 0..len {
            prop_assert_eq!(&emb[t * mult * 3..t * mult * 3 + 3], s.frame(t));
        }
    }
}

#[test]
fn dtw_examples() {
    let a = seq(&[&[1.0, 0.0], &[0.0, 1.0]]);
    assert_eq!(dtw_cost(&a, &a), 0.0);
    // Repeating frames costs nothing under cosine distance.
    let stretched = seq(&[&[1.0, 0.0], &[2.0, 0.0], &[0.0, 3.0]]);
    assert_close(dtw_cost(&a, &stretched), 0.0, 1e-15);
    let b = seq(&[&[0.0, 1.0], &[1.0, 0.0]]);
    // Every path pays 1 at (0,0) and at (1,1); the diagonal is the shortest.
    assert_close(dtw_cost(&a, &b), 1.0, 1e-15);
    let raw = dtw_cost_with(&a, &b, DtwOptions { normalize: false, ..DtwOptions::default() });
    assert_close(raw, 2.0, 1e-15);
    let euclid = dtw_cost_with(&seq(&[&[0.0]]), &seq(&[&[3.0], &[4.0]]), DtwOptions { distance: FrameDistance::Euclidean, normalize: false });
    assert_close(euclid, 7.0, 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn dtw_matches_path_enumeration(n in 1usize..=6, m in 1usize..=6, seed in 0u64..10_000, euclid in any::<bool>()) {
        let mut r = rng(seed);
        let a = Segment::new("a", None, common::uniform_tensor(&mut r, &[n, 3], -1.0, 1.0)).unwrap();
        let b = Segment::new("b", None, common::uniform_tensor(&mut r, &[m, 3], -1.0, 1.0)).unwrap();
        let distance = if euclid { FrameDistance::Euclidean } else { FrameDistance::Cosine };
        let frame = |x: &[f64], y: &[f64]| match distance {
            FrameDistance::Cosine => cosine_distance(x, y),
            FrameDistance::Euclidean => x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt(),
        };
        let cost: Vec<Vec<f64>> = (0..n).map(|i| (0..m).map(|j| frame(a.frame(i), b.frame(j))).collect()).collect();
        for normalize in [true, false] {
            let got = dtw_cost_with(&a, &b, DtwOptions { distance, normalize });
            prop_assert!((got - enumerate_dtw(&cost, normalize)).abs() <= 1e-10);
        }
        prop_assert!((dtw_cost(&a, &b) - dtw_cost(&b, &a)).abs() <= 1e-12);
    }
}
