mod common;

use common::{config, grad_error, uniform};
use mcvivit::loss::{
    attention_map, beta_matrix, correlation_matrix, fd_value, focal_loss, focal_term, harmony_matrix, hp_loss,
    hp_loss_value, p_mci, AdCorreState, FocalParams, HpLossParams, LossKind, DEFAULT_EPSILON,
};
use mcvivit::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MCI: usize = 1;
const NC: usize = 0;
const EPS: f64 = DEFAULT_EPSILON;

fn fresh() -> AdCorreState {
    AdCorreState::new(2, EPS).unwrap()
}

/// Textbook single-pass Pearson formula.
fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx) * (n * syy - sy * sy)).sqrt()
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let d = t.shape()[1];
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

fn random_state(rng: &mut ChaCha8Rng) -> AdCorreState {
    let mut s = fresh();
    let n = rng.random_range(0..30);
    let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
    s.update_confusion(&pred, &truth).unwrap();
    s
}

/// Centred, unit-norm, mutually orthogonal rows 1..=5 of the 8x8 Hadamard
/// matrix.
fn hadamard_rows() -> Vec<Vec<f64>> {
    (1..=5)
        .map(|r: u32| (0..8u32).map(|c| if (r & c).count_ones() % 2 == 0 { 1.0 } else { -1.0 } / 8f64.sqrt()).collect())
        .collect()
}

/// Four embeddings with `corr(i, j) = c_i c_j t_i t_j`, `c = +1` for MCI.
fn controlled_batch(labels: &[usize], t: &[f64]) -> Tensor<f64> {
    let h = hadamard_rows();
    let data: Vec<f64> = (0..4)
        .flat_map(|i| {
            let c = if labels[i] == MCI { 1.0 } else { -1.0 };
            let s = (1.0 - t[i] * t[i]).max(0.0).sqrt();
            (0..8).map(|k| c * t[i] * h[0][k] + s * h[i + 1][k]).collect::<Vec<_>>()
        })
        .collect();
    Tensor::from_vec(&[4, 8], data).unwrap()
}

proptest! {
    #![proptest_config(config(1000))]

    #[test]
    fn focal_without_focusing_is_half_cross_entropy(p in 0.0001f64..0.9999, mci in any::<bool>()) {
        let y = if mci { MCI } else { NC };
        let params = FocalParams { alpha: 0.5, gamma: 0.0 };
        let q = if mci { p } else { 1.0 - p };
        let ce = -q.ln();
        prop_assert!((focal_term(p, y, &params).unwrap() - 0.5 * ce).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(config(1000))]

    #[test]
    fn identical_pairs_give_zero_or_the_hand_derived_fd(seed in any::<u64>(), d in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = uniform(&[1, d], -3.0, 3.0, &mut rng);
        let e = Tensor::from_vec(&[2, d], v.data().repeat(2)).unwrap();
        let same = if rng.random_bool(0.5) { MCI } else { NC };
        prop_assert_eq!(fd_value(&[e.clone()], &[same, same], &random_state(&mut rng)).unwrap(), 0.0);
        let mixed = fd_value(&[e], &[MCI, NC], &fresh()).unwrap();
        prop_assert!((mixed - 2.0 * (1.0 + EPS)).abs() < 1e-10);
    }

    #[test]
    fn zero_lambda_matches_focal_on_random_batches(seed in any::<u64>(), n in 2usize..10) {
        let (logits, emb, labels, state) = batch(seed, n);
        let params = HpLossParams { lambda: 0.0, ..HpLossParams::default() };
        let hp = hp_loss_value(&logits, &[emb.clone()], &labels, &state, &params, LossKind::Hp).unwrap();
        let focal = hp_loss_value(&logits, &[emb], &labels, &state, &params, LossKind::Focal).unwrap();
        prop_assert_eq!(hp, focal);
    }
}

proptest! {
    #![proptest_config(config(200))]

    #[test]
    fn correlation_matches_the_pearson_oracle(seed in any::<u64>(), n in 2usize..8, d in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = uniform(&[n, d], -2.0, 2.0, &mut rng);
        let corm = correlation_matrix(&e).unwrap();
        let r = rows(&e);
        for i in 0..n {
            prop_assert_eq!(corm.data()[i * n + i], 1.0);
            for j in 0..n {
                let c = corm.data()[i * n + j];
                prop_assert_eq!(c, corm.data()[j * n + i]);
                prop_assert!((-1.0..=1.0).contains(&c));
                if i != j {
                    prop_assert!((c - pearson(&r[i], &r[j])).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn correlation_and_fd_are_affine_invariant(
        seed in any::<u64>(), n in 2usize..7, shift in -5.0f64..5.0, scale in 0.1f64..10.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = uniform(&[n, 16], -1.0, 1.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let state = random_state(&mut rng);
        let row = rng.random_range(0..n);
        let mut moved = e.clone();
        for v in &mut moved.data_mut()[row * 16..(row + 1) * 16] {
            *v = *v * scale + shift;
        }
        let (a, b) = (correlation_matrix(&e).unwrap(), correlation_matrix(&moved).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
        let fa = fd_value(&[e], &labels, &state).unwrap();
        let fb = fd_value(&[moved], &labels, &state).unwrap();
        prop_assert!((fa - fb).abs() < 1e-10);
    }

    #[test]
    fn fd_is_non_negative(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = uniform(&[n, 8], -1.0, 1.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        prop_assert!(fd_value(&[e], &labels, &random_state(&mut rng)).unwrap() >= 0.0);
    }

    #[test]
    fn fd_never_rises_as_correlations_approach_the_labels(
        seed in any::<u64>(), labels in prop::collection::vec(0usize..2, 4), k in 0usize..4, bump in 0.0f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut raised = t.clone();
        raised[k] += bump * (1.0 - t[k]);
        let state = random_state(&mut rng);
        let before = fd_value(&[controlled_batch(&labels, &t)], &labels, &state).unwrap();
        let after = fd_value(&[controlled_batch(&labels, &raised)], &labels, &state).unwrap();
        prop_assert!(after <= before + 1e-12, "{before} -> {after}");
    }
}

#[test]
fn controlled_batch_has_the_designed_correlations() {
    let labels = [MCI, MCI, NC, MCI];
    let t = [0.9, 0.5, 0.7, 0.2];
    let corm = correlation_matrix(&controlled_batch(&labels, &t)).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                let ci = if labels[i] == MCI { 1.0 } else { -1.0 };
                let cj = if labels[j] == MCI { 1.0 } else { -1.0 };
                assert!((corm.data()[i * 4 + j] - ci * cj * t[i] * t[j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn p_mci_examples() {
    assert_eq!(p_mci(0.9, MCI).unwrap(), 0.9);
    assert!((p_mci(0.3, NC).unwrap() - 0.7).abs() < 1e-15);
    assert_eq!(p_mci(0.5, MCI).unwrap(), 0.5);
    assert_eq!(p_mci(0.5, NC).unwrap(), 0.5);
    assert!(p_mci(1.5, MCI).is_err());
    assert!(p_mci(0.5, 2).is_err());
}

#[test]
fn focal_examples() {
    let params = FocalParams::default();
    let v = focal_term(0.9, MCI, &params).unwrap();
    assert!((v - 2.634e-4).abs() < 5e-8, "{v}");
    assert!((v - 0.25 * 0.01 * -(0.9f64.ln())).abs() < 1e-15);
    assert!(focal_term(1.0 - 1e-12, MCI, &params).unwrap() < 1e-12);
    let batch = focal_loss(&[0.9, 0.2], &[MCI, NC], &params).unwrap();
    let mean = (focal_term(0.9, MCI, &params).unwrap() + focal_term(0.2, NC, &params).unwrap()) / 2.0;
    assert!((batch - mean).abs() < 1e-15);
}

#[test]
fn beta_and_harmony_examples() {
    assert_eq!(beta_matrix::<f64>(1).unwrap().data(), &[0.0]);
    assert_eq!(beta_matrix::<f64>(2).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    for n in 1..9 {
        let b = beta_matrix::<f64>(n).unwrap();
        assert_eq!((0..n).map(|i| b.data()[i * n + i]).sum::<f64>(), 0.0);
    }
    let phi = harmony_matrix::<f64>(&[MCI, MCI, NC]).unwrap();
    assert_eq!(phi.data(), &[1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, -1.0, 1.0]);
}

#[test]
fn attention_map_and_omega_examples() {
    let state = fresh();
    assert_eq!(state.omega(MCI), 1.0 + EPS);

    let mut perfect = fresh();
    perfect.update_confusion(&[MCI, NC], &[MCI, NC]).unwrap();
    let omega = attention_map::<f64>(&perfect, &[MCI, NC, NC]).unwrap();
    assert!(omega.data().iter().all(|&v| (v - 2.0 * EPS).abs() < 1e-15));

    let mut split = fresh();
    split.update_confusion(&[MCI, MCI], &[MCI, NC]).unwrap();
    assert_eq!(split.omega(MCI), EPS);
    assert_eq!(split.omega(NC), 1.0 + EPS);
    let omega = attention_map::<f64>(&split, &[MCI, NC]).unwrap();
    let want = [2.0 * EPS, 1.0 + 2.0 * EPS, 1.0 + 2.0 * EPS, 2.0 + 2.0 * EPS];
    for (a, b) in omega.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }

    let mut partial = fresh();
    partial.update_confusion(&[NC, NC, NC, NC, MCI], &[NC; 5]).unwrap();
    assert!((partial.omega(NC) - (0.2 + EPS)).abs() < 1e-15);
    assert!(partial.update_confusion(&[2], &[0]).is_err());
}

#[test]
fn correlation_examples() {
    let v = [0.3, -1.2, 0.8, 2.0, 0.1];
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    let e = Tensor::from_vec(&[3, 5], [v.to_vec(), v.to_vec(), neg].concat()).unwrap();
    let c = correlation_matrix(&e).unwrap();
    assert!((c.data()[1] - 1.0).abs() < 1e-15);
    assert!((c.data()[2] + 1.0).abs() < 1e-15);

    let flat = Tensor::from_vec(&[2, 5], [v.to_vec(), vec![0.4; 5]].concat()).unwrap();
    assert_eq!(correlation_matrix(&flat).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn fd_examples() {
    let v = [0.3, -1.2, 0.8, 2.0];
    let e = Tensor::from_vec(&[2, 4], [v, v].concat()).unwrap();
    assert_eq!(fd_value(&[e.clone()], &[MCI, MCI], &fresh()).unwrap(), 0.0);
    let mixed = fd_value(&[e.clone()], &[MCI, NC], &fresh()).unwrap();
    assert!((mixed - 2.0 * (1.0 + EPS)).abs() < 1e-12, "{mixed}");
    let single = Tensor::from_vec(&[1, 4], v.to_vec()).unwrap();
    assert_eq!(fd_value(&[single], &[MCI], &fresh()).unwrap(), 0.0);
}

fn batch(seed: u64, n: usize) -> (Tensor<f64>, Tensor<f64>, Vec<usize>, AdCorreState) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = uniform(&[n, 2], -2.0, 2.0, &mut rng);
    let emb = uniform(&[n, 32], -1.0, 1.0, &mut rng);
    let labels: Vec<usize> = (0..n).map(|i| if i < 2 { i } else { rng.random_range(0..2) }).collect();
    let state = random_state(&mut rng);
    (logits, emb, labels, state)
}

#[test]
fn hp_gradient_matches_finite_differences_with_frozen_state() {
    for seed in 0..10 {
        let (logits, emb, labels, state) = batch(seed, 6);
        let params = HpLossParams::default();
        for kind in [LossKind::Hp, LossKind::Focal, LossKind::Fd] {
            let f = |g: &mut Graph<f64>, v: &[Var]| {
                let mut s = state.clone();
                Ok(hp_loss(g, v[0], &[v[1]], &labels, &mut s, &params, kind)?.loss)
            };
            let err = grad_error(&f, &[logits.clone(), emb.clone()], 1e-4);
            assert!(err < 1e-4, "seed {seed} {kind}: {err:e}");
        }
    }
}

#[test]
fn graph_value_matches_plain_evaluation_and_updates_state_afterwards() {
    let (logits, emb, labels, state) = batch(3, 8);
    let params = HpLossParams::default();
    let want = hp_loss_value(&logits, &[emb.clone()], &labels, &state, &params, LossKind::Hp).unwrap();
    let mut s = state.clone();
    let mut g = Graph::new();
    let l = g.constant(logits.clone()).unwrap();
    let e = g.constant(emb).unwrap();
    let terms = hp_loss(&mut g, l, &[e], &labels, &mut s, &params, LossKind::Hp).unwrap();
    assert!((g.value(terms.loss).item() - want).abs() < 1e-12);
    assert!((terms.focal + 0.5 * terms.fd - want).abs() < 1e-12);
    let seen: u64 = (0..2).flat_map(|t| (0..2).map(move |p| (t, p))).map(|(t, p)| s.count(t, p)).sum();
    let before: u64 = (0..2).flat_map(|t| (0..2).map(move |p| (t, p))).map(|(t, p)| state.count(t, p)).sum();
    assert_eq!(seen, before + 8);
}

#[test]
fn zero_lambda_reduces_to_focal() {
    let (logits, emb, labels, state) = batch(5, 8);
    let params = HpLossParams {
        lambda: 0.0,
        ..HpLossParams::default()
    };
    let hp = hp_loss_value(&logits, &[emb.clone()], &labels, &state, &params, LossKind::Hp).unwrap();
    let focal = hp_loss_value(&logits, &[emb], &labels, &state, &params, LossKind::Focal).unwrap();
    assert_eq!(hp, focal);
}

#[test]
fn zero_fd_batch_reduces_to_focal() {
    let v = [0.3, -1.2, 0.8, 2.0];
    let e = Tensor::from_vec(&[2, 4], [v, v].concat()).unwrap();
    let logits = Tensor::from_vec(&[2, 2], vec![0.1, 0.7, -0.3, 0.2]).unwrap();
    let params = HpLossParams::default();
    let hp = hp_loss_value(&logits, &[e.clone()], &[MCI, MCI], &fresh(), &params, LossKind::Hp).unwrap();
    let focal = hp_loss_value(&logits, &[e], &[MCI, MCI], &fresh(), &params, LossKind::Focal).unwrap();
    assert_eq!(hp, focal);
    assert_eq!(params.lambda, 0.5);
}
