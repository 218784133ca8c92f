mod common;

use awe::autodiff::{Tape, Tensor};
use awe::objectives::{
    ae_loss, anneal_weight, cae_loss, gaussian_log_likelihood, j_cvae, j_mcvae, j_vae, kl_diag_gaussian_std_normal,
    log_likelihood_rows, triplet_loss, AnnealSchedule,
};
use awe::rnn::{decode, encode, sample_latent, Model, ModelConfig, Posterior, Segment};
use common::{assert_close, normal_tensor, rng, segment, toy_model, toy_segments, uniform_tensor};
use proptest::prelude::*;

const SIGMA2: f64 = 0.01;

fn value_of<F>(model: &Model<f64>, f: F) -> f64
where
    F: FnOnce(&mut Tape<f64>, &awe::rnn::ModelVars) -> awe::objectives::Objective<f64>,
{
    let mut tape = Tape::new();
    let mv = model.bind(&mut tape, false);
    let obj = f(&mut tape, &mv);
    tape.value(obj.value).item()
}

/// `log p(target | z)` with `z` the `noise` draw from `source`'s posterior.
fn cross_ll(model: &Model<f64>, source: &Segment<f64>, target: &Segment<f64>, noise: &[f64], sigma2: f64) -> f64 {
    let post = encode(&model.encoder, source).unwrap();
    let eps = Tensor::matrix(1, noise.len(), noise.to_vec()).unwrap();
    let z = sample_latent(&post, &eps).unwrap();
    let recon = decode(&model.decoder, z.row(0), target.len()).unwrap();
    gaussian_log_likelihood(target.frames(), &recon, sigma2).unwrap()
}

fn noise_rows(noise: &Tensor<f64>, r: usize) -> &[f64] {
    noise.row(r)
}

#[test]
fn log_likelihood_examples() {
    let x = Tensor::matrix(1, 2, vec![0.4, -1.3]).unwrap();
    assert_close(gaussian_log_likelihood(&x, &x, 0.01).unwrap(), -(2.0 * std::f64::consts::PI * 0.01).ln(), 1e-12);
    assert!(gaussian_log_likelihood(&x, &x, 1.0 / (2.0 * std::f64::consts::PI)).unwrap().abs() < 1e-15);
    let y = Tensor::matrix(2, 1, vec![0.4, -1.3]).unwrap();
    assert!(gaussian_log_likelihood(&x, &y, 0.01).is_err());
}

#[test]
fn log_likelihood_matches_scalar_oracle() {
    let mut r = rng(1);
    for _ in 0..20 {
        let x = uniform_tensor(&mut r, &[7, 3], -2.0, 2.0);
        let xh = uniform_tensor(&mut r, &[7, 3], -2.0, 2.0);
        let mut want = 0.0;
        for (a, b) in x.data().iter().zip(xh.data()) {
            want += -0.5 * (2.0 * std::f64::consts::PI * SIGMA2).ln() - (a - b) * (a - b) / (2.0 * SIGMA2);
        }
        let got = gaussian_log_likelihood(&x, &xh, SIGMA2).unwrap();
        assert_close(got, want, 1e-12);
    }
}

#[test]
fn log_likelihood_gradient_vanishes_at_optimum() {
    let x = uniform_tensor(&mut rng(2), &[5, 3], -1.0, 1.0);
    let mut tape = Tape::new();
    let recon = tape.leaf(x.clone());
    let ll = log_likelihood_rows(&mut tape, recon, &[&x], SIGMA2).unwrap();
    let s = tape.sum(ll);
    tape.backward(s).unwrap();
    assert!(tape.grad(recon).unwrap().data().iter().all(|&g| g == 0.0));
}

#[test]
fn kl_examples() {
    let kl = |m: Vec<f64>, lv: Vec<f64>| kl_diag_gaussian_std_normal(&Posterior { mean: m, log_variance: lv });
    assert_eq!(kl(vec![0.0; 3], vec![0.0; 3]), 0.0);
    assert_close(kl(vec![1.0], vec![0.0]), 0.5, 1e-15);
    assert_close(kl(vec![0.0], vec![4f64.ln()]), 0.5 * (3.0 - 4f64.ln()), 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kl_is_nonnegative(m in prop::collection::vec(-5.0f64..5.0, 1..8), seed in 0u64..1000) {
        let lv: Vec<f64> = {
            let t = uniform_tensor(&mut rng(seed), &[m.len()], -4.0, 4.0);
            t.data().to_vec()
        };
        let kl = kl_diag_gaussian_std_normal(&Posterior { mean: m.clone(), log_variance: lv.clone() });
        prop_assert!(kl >= 0.0);
        if m.iter().chain(&lv).any(|v| v.abs() > 1e-3) {
            prop_assert!(kl > 0.0);
        }
    }

    #[test]
    fn anneal_weight_increases(t in 0.0f64..5000.0, dt in 0.5f64..100.0) {
        let s = AnnealSchedule::default();
        let (a, b) = (anneal_weight(t, &s), anneal_weight(t + dt, &s));
        prop_assert!(a > 0.0 && a <= 1.0);
        prop_assert!(b >= a);
        // Near saturation the increments fall below the spacing of f64.
        if 1.0 - b > 1e-12 {
            prop_assert!(b > a);
        }
    }
}

#[test]
fn anneal_examples() {
    let s = AnnealSchedule::default();
    assert_eq!(anneal_weight(1000.0, &s), 0.5);
    assert_close(anneal_weight(0.0, &s), 1.0 / (1.0 + 20f64.exp()), 1e-12);
    assert_close(anneal_weight(0.0, &s), 2.061153622e-9, 1e-9);
    assert_eq!(s.weight(1000), 0.5);
}

#[test]
fn vae_single_sample_without_kl_is_mean_log_likelihood() {
    let model = toy_model(3);
    let segs = toy_segments(&mut rng(4), 4);
    let refs: Vec<&Segment<f64>> = segs.iter().collect();
    let noise = normal_tensor(&mut rng(5), &[4, 4]);
    let got = value_of(&model, |t, mv| j_vae(t, mv, &refs, 1, 0.0, SIGMA2, &noise).unwrap());
    let want: f64 = segs.iter().enumerate().map(|(b, s)| cross_ll(&model, s, s, noise_rows(&noise, b), SIGMA2)).sum::<f64>() / 4.0;
    assert_close(got, want, 1e-12);
}

#[test]
fn vae_matches_oracle_with_samples_and_kl() {
    let model = toy_model(6);
    let segs = toy_segments(&mut rng(7), 3);
    let refs: Vec<&Segment<f64>> = segs.iter().collect();
    let (k, w) = (3, 0.7);
    let noise = normal_tensor(&mut rng(8), &[k * 3, 4]);
    let got = value_of(&model, |t, mv| j_vae(t, mv, &refs, k, w, SIGMA2, &noise).unwrap());
    let mut want = 0.0;
    for (b, s) in segs.iter().enumerate() {
        let ll: f64 = (0..k).map(|j| cross_ll(&model, s, s, noise_rows(&noise, j * 3 + b), SIGMA2)).sum::<f64>() / k as f64;
        want += ll - w * kl_diag_gaussian_std_normal(&encode(&model.encoder, s).unwrap());
    }
    assert_close(got, want / 3.0, 1e-12);
}

#[test]
fn vae_duplicated_batch_keeps_value() {
    let model = toy_model(9);
    let segs = toy_segments(&mut rng(10), 3);
    let refs: Vec<&Segment<f64>> = segs.iter().collect();
    let doubled: Vec<&Segment<f64>> = refs.iter().chain(&refs).copied().collect();
    let k = 2;
    let noise = normal_tensor(&mut rng(11), &[k * 3, 4]);
    let noise2 = Tensor::from_fn(&[k * 6, 4], |i| {
        let (row, c) = (i / 4, i % 4);
        let (j, b) = (row / 6, row % 6);
        noise.row(j * 3 + b % 3)[c]
    });
    let a = value_of(&model, |t, mv| j_vae(t, mv, &refs, k, 0.3, SIGMA2, &noise).unwrap());
    let b = value_of(&model, |t, mv| j_vae(t, mv, &doubled, k, 0.3, SIGMA2, &noise2).unwrap());
    assert_close(a, b, 1e-12);
}

#[test]
fn cvae_self_pair_doubles_single_log_likelihood() {
    let model = toy_model(12);
    let x = segment(&mut rng(13), "x", 5, 4);
    let eps = normal_tensor(&mut rng(14), &[1, 4]);
    let noise = Tensor::from_fn(&[2, 4], |i| eps.data()[i % 4]);
    let got = value_of(&model, |t, mv| j_cvae(t, mv, &[(&x, &x)], 1, 0.0, SIGMA2, &noise).unwrap());
    assert_close(got, 2.0 * cross_ll(&model, &x, &x, eps.data(), SIGMA2), 1e-12);
}

#[test]
fn cvae_is_order_invariant_with_swapped_noise() {
    let model = toy_model(15);
    let mut r = rng(16);
    let (a, b) = (segment(&mut r, "a", 3, 4), segment(&mut r, "b", 6, 4));
    let k = 3;
    let noise = normal_tensor(&mut r, &[2 * k, 4]);
    let swapped = Tensor::from_fn(&[2 * k, 4], |i| {
        let (row, c) = (i / 4, i % 4);
        noise.row(row ^ 1)[c]
    });
    let v1 = value_of(&model, |t, mv| j_cvae(t, mv, &[(&a, &b)], k, 0.5, SIGMA2, &noise).unwrap());
    let v2 = value_of(&model, |t, mv| j_cvae(t, mv, &[(&b, &a)], k, 0.5, SIGMA2, &swapped).unwrap());
    assert_close(v1, v2, 1e-12);
}

#[test]
fn cvae_matches_oracle() {
    let model = toy_model(17);
    let mut r = rng(18);
    let segs = toy_segments(&mut r, 4);
    let pairs = [(&segs[0], &segs[1]), (&segs[2], &segs[3])];
    let (k, w) = (2, 0.001);
    let noise = normal_tensor(&mut r, &[k * 4, 4]);
    let got = value_of(&model, |t, mv| j_cvae(t, mv, &pairs, k, w, SIGMA2, &noise).unwrap());
    let inputs = [&segs[0], &segs[2], &segs[1], &segs[3]];
    let targets = [&segs[1], &segs[3], &segs[0], &segs[2]];
    let mut want = 0.0;
    for b in 0..4 {
        let ll: f64 =
            (0..k).map(|j| cross_ll(&model, inputs[b], targets[b], noise_rows(&noise, j * 4 + b), SIGMA2)).sum::<f64>() / k as f64;
        want += ll - w * kl_diag_gaussian_std_normal(&encode(&model.encoder, inputs[b]).unwrap());
    }
    assert_close(got, want / 2.0, 1e-12);
}

#[test]
fn mcvae_equals_cvae_bitwise_for_one_sample() {
    let model = toy_model(19);
    let mut r = rng(20);
    let segs = toy_segments(&mut r, 6);
    let pairs: Vec<(&Segment<f64>, &Segment<f64>)> = segs.chunks(2).map(|c| (&c[0], &c[1])).collect();
    let noise = normal_tensor(&mut r, &[6, 4]);
    let a = value_of(&model, |t, mv| j_cvae(t, mv, &pairs, 1, 0.001, SIGMA2, &noise).unwrap());
    let b = value_of(&model, |t, mv| j_mcvae(t, mv, &pairs, 1, 0.001, SIGMA2, &noise).unwrap());
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn mcvae_dominates_cvae() {
    let model = toy_model(21);
    let mut r = rng(22);
    let segs = toy_segments(&mut r, 6);
    let pairs: Vec<(&Segment<f64>, &Segment<f64>)> = segs.chunks(2).map(|c| (&c[0], &c[1])).collect();
    for k in [2, 5] {
        let noise = normal_tensor(&mut r, &[k * 6, 4]);
        let a = value_of(&model, |t, mv| j_cvae(t, mv, &pairs, k, 0.001, SIGMA2, &noise).unwrap());
        let b = value_of(&model, |t, mv| j_mcvae(t, mv, &pairs, k, 0.001, SIGMA2, &noise).unwrap());
        assert!(b >= a, "{b} < {a}");
    }
}

/// Dropping every non-selected sample must leave both the value and the
/// gradient of the maximal-sampling objective unchanged.
#[test]
fn mcvae_gradient_flows_only_through_selected_samples() {
    let model = toy_model(23);
    let mut r = rng(24);
    let (a, b) = (segment(&mut r, "a", 4, 4), segment(&mut r, "b", 5, 4));
    let pairs = [(&a, &b)];
    let k = 3;
    let noise = normal_tensor(&mut r, &[2 * k, 4]);

    let grads = |noise: &Tensor<f64>, samples: usize, max: bool| {
        let mut tape = Tape::new();
        let mv = model.bind(&mut tape, true);
        let obj = if max {
            j_mcvae(&mut tape, &mv, &pairs, samples, 0.001, SIGMA2, noise).unwrap()
        } else {
            j_cvae(&mut tape, &mv, &pairs, samples, 0.001, SIGMA2, noise).unwrap()
        };
        tape.backward(obj.value).unwrap();
        let g: Vec<f64> = mv.all.iter().flat_map(|&v| tape.grad(v).unwrap().data().to_vec()).collect();
        (tape.value(obj.value).item(), g, obj.selected)
    };
    let (v_max, g_max, selected) = grads(&noise, k, true);
    let selected = selected.unwrap();

    // Independent argmax: per direction, the sample with the best cross
    // log-likelihood.
    let dirs = [(&a, &b), (&b, &a)];
    for (d, (src, tgt)) in dirs.iter().enumerate() {
        let lls: Vec<f64> = (0..k).map(|j| cross_ll(&model, src, tgt, noise.row(j * 2 + d), SIGMA2)).collect();
        let best = (0..k).fold(0, |bi, j| if lls[j] > lls[bi] { j } else { bi });
        assert_eq!(selected[d], best);
    }

    let kept = Tensor::from_fn(&[2, 4], |i| noise.row(selected[i / 4] * 2 + i / 4)[i % 4]);
    let (v_one, g_one, _) = grads(&kept, 1, false);
    assert_eq!(v_max.to_bits(), v_one.to_bits());
    for (x, y) in g_max.iter().zip(&g_one) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{x} vs {y}");
    }
}

fn constant_output_model(feature_dim: usize, out: f64) -> Model<f64> {
    let config = ModelConfig { feature_dim, hidden_dim: 4, latent_dim: 2, layers: 2, decoder_bidirectional: true };
    let mut model = Model::zeros(&config);
    model.decoder.out_bias = Tensor::full(&[feature_dim], out);
    model
}

#[test]
fn ae_loss_examples() {
    let model = constant_output_model(3, 1.0);
    let zeros = Segment::new("z", None, Tensor::zeros(&[2, 3])).unwrap();
    assert_eq!(value_of(&model, |t, mv| ae_loss(t, mv, &[&zeros]).unwrap()), 6.0);
    let ones = Segment::new("o", None, Tensor::ones(&[4, 3])).unwrap();
    assert_eq!(value_of(&model, |t, mv| ae_loss(t, mv, &[&ones]).unwrap()), 0.0);
    assert_eq!(value_of(&model, |t, mv| ae_loss(t, mv, &[&zeros, &ones]).unwrap()), 3.0);
}

#[test]
fn cae_loss_matches_hand_computation() {
    let model = constant_output_model(3, 0.5);
    let mut r = rng(25);
    let (x1, x2) = (segment(&mut r, "a", 2, 3), segment(&mut r, "b", 4, 3));
    let sq = |s: &Segment<f64>| s.frames().data().iter().map(|v| (v - 0.5) * (v - 0.5)).sum::<f64>();
    let got = value_of(&model, |t, mv| cae_loss(t, mv, &[(&x1, &x2)]).unwrap());
    assert_close(got, (sq(&x1) + sq(&x2)) / 2.0, 1e-12);
}

#[test]
fn cae_self_pair_equals_ae() {
    let model = toy_model(26);
    let x = segment(&mut rng(27), "x", 5, 4);
    let a = value_of(&model, |t, mv| ae_loss(t, mv, &[&x]).unwrap());
    let c = value_of(&model, |t, mv| cae_loss(t, mv, &[(&x, &x)]).unwrap());
    assert_close(a, c, 1e-12);
    assert!(a >= 0.0);
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

fn triplet_value(model: &Model<f64>, triplets: &[(&Segment<f64>, &Segment<f64>, &Segment<f64>)], margin: f64) -> f64 {
    let mut tape = Tape::new();
    let enc = model.encoder.bind(&mut tape, false);
    let obj = triplet_loss(&mut tape, &enc, triplets, margin).unwrap();
    tape.value(obj.value).item()
}

#[test]
fn triplet_identical_embeddings_cost_the_margin() {
    let model = toy_model(28);
    let x = segment(&mut rng(29), "x", 4, 4);
    assert_close(triplet_value(&model, &[(&x, &x, &x)], 0.4), 0.4, 1e-12);
}

#[test]
fn triplet_satisfied_margin_costs_nothing() {
    let model = toy_model(30);
    let mut r = rng(31);
    let (a, d) = (segment(&mut r, "a", 4, 4), segment(&mut r, "d", 6, 4));
    assert_eq!(triplet_value(&model, &[(&a, &a, &d)], 0.0), 0.0);
}

#[test]
fn triplet_matches_oracle_and_stays_in_range() {
    let model = toy_model(32);
    let segs = toy_segments(&mut rng(33), 9);
    let trips: Vec<(&Segment<f64>, &Segment<f64>, &Segment<f64>)> = segs.chunks(3).map(|c| (&c[0], &c[1], &c[2])).collect();
    let emb = |s: &Segment<f64>| encode(&model.encoder, s).unwrap().mean;
    for margin in [0.0, 0.4, 1.0] {
        let got = triplet_value(&model, &trips, margin);
        let want: f64 = trips
            .iter()
            .map(|(a, s, d)| (margin + cosine(&emb(a), &emb(s)) - cosine(&emb(a), &emb(d))).max(0.0))
            .sum::<f64>()
            / trips.len() as f64;
        assert_close(got, want, 1e-12);
        assert!((0.0..=margin + 2.0).contains(&got));
    }
}
