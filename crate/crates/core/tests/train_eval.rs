mod common;

use common::{config, small_cohort, small_model, small_train};
use mcvivit::data::{plan_folds, Label};
use mcvivit::loss::LossKind;
use mcvivit::model::HeadKind;
use mcvivit::train::{
    aggregate_subject, clip_accuracy, compute_metrics, cyclic_lr, load_checkpoint, percent, roc_auc, run_kfold,
    save_checkpoint, split_fold, train_fold, Adam, AdamConfig, Confusion, KFoldReport, Trainer,
};
use mcvivit::{McVivit32, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use Label::{Mci, Nc};

fn label(b: bool) -> Label {
    if b {
        Mci
    } else {
        Nc
    }
}

/// Pairwise Mann-Whitney count with half credit for ties.
fn auc_oracle(scores: &[f64], truth: &[Label]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if truth[i] == Mci && truth[j] == Nc {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

proptest! {
    #![proptest_config(config(1000))]

    #[test]
    fn rates_match_a_naive_recount(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
        let predicted: Vec<Label> = pairs.iter().map(|p| label(p.0)).collect();
        let truth: Vec<Label> = pairs.iter().map(|p| label(p.1)).collect();
        let c = Confusion::from_predictions(&predicted, &truth);
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (p, t) in predicted.iter().zip(&truth) {
            if *p == Mci && *t == Mci { tp += 1 }
            if *p == Mci && *t == Nc { fp += 1 }
            if *p == Nc && *t == Nc { tn += 1 }
            if *p == Nc && *t == Mci { fn_ += 1 }
        }
        let div = |a: usize, b: usize| if b == 0 { None } else { Some(a as f64 / b as f64) };
        prop_assert_eq!(c.total(), pairs.len());
        prop_assert_eq!(c.accuracy(), div(tp + tn, pairs.len()));
        prop_assert_eq!(c.sensitivity(), div(tp, tp + fn_));
        prop_assert_eq!(c.specificity(), div(tn, tn + fp));
        prop_assert_eq!(c.f1(), div(2 * tp, 2 * tp + fp + fn_));
        if let (Some(p), Some(r), Some(f1)) = (div(tp, tp + fp), div(tp, tp + fn_), c.f1()) {
            if p + r > 0.0 {
                prop_assert!((f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(config(200))]

    #[test]
    fn auc_matches_pairwise_counting(seed in any::<u64>(), n in 2usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut truth: Vec<Label> = (0..n).map(|_| label(rng.random_bool(0.4))).collect();
        truth[0] = Mci;
        truth[1] = Nc;
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8u8)) / 8.0).collect();
        let auc = roc_auc(&scores, &truth).unwrap();
        prop_assert!((auc - auc_oracle(&scores, &truth)).abs() < 1e-12);
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps(seed in any::<u64>(), n in 2usize..60, which in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut truth: Vec<Label> = (0..n).map(|_| label(rng.random_bool(0.5))).collect();
        truth[0] = Mci;
        truth[1] = Nc;
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..1024u16)) / 1024.0).collect();
        let mapped: Vec<f64> = scores
            .iter()
            .map(|&s| match which {
                0 => s.exp(),
                1 => s * s * s,
                _ => 7.0 * s - 2.0,
            })
            .collect();
        prop_assert_eq!(roc_auc(&scores, &truth), roc_auc(&mapped, &truth));
    }
}

#[test]
fn auc_of_random_scores_is_one_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let truth: Vec<Label> = (0..10_000).map(|i| label(i % 2 == 0)).collect();
    let scores: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
    let auc = roc_auc(&scores, &truth).unwrap();
    assert!((auc - 0.5).abs() <= 0.02, "{auc}");
}

#[test]
fn twenty_nine_of_thirty_two_is_90_63_percent() {
    let truth: Vec<Label> = (0..32).map(|i| label(i < 20)).collect();
    let scores: Vec<f64> = (0..32)
        .map(|i| {
            let right = i >= 3;
            if (i < 20) == right { 0.8 } else { 0.2 }
        })
        .collect();
    let report = compute_metrics(&scores, &truth).unwrap();
    assert_eq!(report.confusion.tp + report.confusion.tn, 29);
    assert_eq!(percent(report.accuracy.unwrap()), 90.63);
}

#[test]
fn perfect_and_degenerate_reports() {
    let truth = [Mci, Mci, Nc, Nc];
    let r = compute_metrics(&[0.9, 0.7, 0.2, 0.1], &truth).unwrap();
    assert_eq!((r.accuracy, r.f1, r.auc), (Some(1.0), Some(1.0), Some(1.0)));
    assert_eq!((r.sensitivity, r.specificity), (Some(1.0), Some(1.0)));
    let one_class = compute_metrics(&[0.9, 0.2], &[Mci, Mci]).unwrap();
    assert_eq!((one_class.auc, one_class.specificity), (None, None));
    assert_eq!(one_class.sensitivity, Some(0.5));
    assert!(compute_metrics(&[f64::NAN], &[Mci]).is_err());
    assert!(compute_metrics(&[0.5], &[Mci, Nc]).is_err());
}

#[test]
fn subject_aggregation_examples() {
    assert_eq!(aggregate_subject(&[0.9; 4]).unwrap().1, Mci);
    assert_eq!(aggregate_subject(&[0.4, 0.6]).unwrap(), (0.5, Mci));
    let mut mixed = vec![0.3; 10];
    mixed.extend([0.9, 0.9]);
    let (score, l) = aggregate_subject(&mixed).unwrap();
    assert!((score - 0.4).abs() < 1e-12);
    assert_eq!(l, Nc);
    assert!(aggregate_subject(&[]).is_err());
}

#[test]
fn adam_examples() {
    let mut p = vec![Tensor::<f64>::from_vec(&[2], vec![1.0, -2.0]).unwrap()];
    let mut adam = Adam::new(AdamConfig::default(), &p);
    adam.step(&mut p, &[Tensor::zeros(&[2])], 0.1).unwrap();
    assert_eq!(p[0].data(), &[1.0, -2.0]);

    let mut adam = Adam::new(AdamConfig::default(), &p);
    let g = Tensor::from_vec(&[2], vec![3.0, -0.5]).unwrap();
    let mut before = p[0].data().to_vec();
    for _ in 0..200 {
        adam.step(&mut p, &[g.clone()], 0.01).unwrap();
        let now = p[0].data().to_vec();
        let moves = [now[0] - before[0], now[1] - before[1]];
        assert!((moves[0] + 0.01).abs() < 1e-6 && (moves[1] - 0.01).abs() < 1e-6);
        before = now;
    }

    let bad = Tensor::from_vec(&[2], vec![f64::NAN, 0.0]).unwrap();
    assert!(adam.step(&mut p, &[bad], 0.01).is_err());
}

#[test]
fn adam_minimises_a_quadratic() {
    let target = [3.0, -1.5, 0.25];
    let mut p = vec![Tensor::<f64>::zeros(&[3])];
    let mut adam = Adam::new(AdamConfig::default(), &p);
    let mut reached = None;
    for step in 1..=500 {
        let g: Vec<f64> = p[0].data().iter().zip(target).map(|(x, t)| 2.0 * (x - t)).collect();
        adam.step(&mut p, &[Tensor::from_vec(&[3], g).unwrap()], 0.05).unwrap();
        if p[0].data().iter().zip(target).all(|(x, t)| (x - t).abs() < 1e-4) {
            reached = Some(step);
            break;
        }
    }
    assert!(reached.is_some(), "ended at {:?}", p[0].data());
}

#[test]
fn cyclic_schedule_examples() {
    let (lo, hi, cycle) = (1e-6, 1e-4, 40);
    assert_eq!(cyclic_lr(0, lo, hi, cycle), lo);
    assert!((cyclic_lr(20, lo, hi, cycle) - hi).abs() < 1e-18);
    assert!((cyclic_lr(60, lo, hi, cycle) - (lo + (hi - lo) / 2.0)).abs() < 1e-18);
    for step in 0..400 {
        let lr = cyclic_lr(step, lo, hi, cycle);
        assert!((lo..=hi).contains(&lr));
    }
}

#[test]
fn loss_falls_over_the_first_fifty_steps() {
    let cohort = small_cohort(10, 6, 0.0, 2);
    let mut drops = Vec::new();
    for seed in 0..5 {
        let cfg = small_train(seed, 50);
        let model = McVivit32::new(small_model(HeadKind::Mc), seed).unwrap();
        let mut trainer = Trainer::new(model, cfg, 1).unwrap();
        let clips: Vec<_> = cohort.clips.iter().collect();
        let log = trainer.fit(&clips).unwrap();
        assert_eq!(log.len(), 50);
        let mean = |s: &[mcvivit::train::StepLog]| s.iter().map(|l| l.loss).sum::<f64>() / s.len() as f64;
        drops.push(mean(&log[..10]) - mean(&log[40..]));
    }
    drops.sort_by(f64::total_cmp);
    assert!(drops[2] > 0.0, "median change {:?}", drops);
}

#[test]
fn every_loss_and_head_variant_trains() {
    let cohort = small_cohort(4, 3, 0.3, 3);
    let plan = plan_folds(cohort.subjects.len(), 2, 0).unwrap();
    for head in [HeadKind::Mc, HeadKind::NoMc] {
        for loss in [LossKind::Hp, LossKind::Focal, LossKind::Fd] {
            let cfg = mcvivit::train::TrainConfig { loss, ..small_train(1, 3) };
            let out = train_fold::<f32>(&cohort, &plan, 0, &small_model(head), &cfg).unwrap();
            assert_eq!(out.history.len(), 3);
            assert!(out.history.iter().all(|s| s.loss.is_finite()));
        }
    }
}

#[test]
fn train_fold_is_deterministic() {
    let cohort = small_cohort(5, 3, 0.0, 4);
    let plan = plan_folds(cohort.subjects.len(), 2, 9).unwrap();
    let cfg = small_train(9, 6);
    let a = train_fold::<f32>(&cohort, &plan, 1, &small_model(HeadKind::Mc), &cfg).unwrap();
    let b = train_fold::<f32>(&cohort, &plan, 1, &small_model(HeadKind::Mc), &cfg).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.predictions, b.predictions);
    let bits = |o: &mcvivit::train::FoldOutcome<f32>| {
        o.model.store().values().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>()
    };
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn folds_never_share_a_subject() {
    let cohort = small_cohort(9, 5, 0.0, 5);
    let plan = plan_folds(cohort.subjects.len(), 3, 1).unwrap();
    let mut seen = std::collections::BTreeSet::new();
    for fold in 0..plan.k {
        let (train, eval) = split_fold(&cohort, &plan, fold).unwrap();
        assert_eq!(train.len() + eval.len(), cohort.clips.len());
        let eval_ids: std::collections::BTreeSet<_> = eval.iter().map(|c| c.subject_id.clone()).collect();
        assert!(train.iter().all(|c| !eval_ids.contains(&c.subject_id)));
        for id in eval_ids {
            assert!(seen.insert(id), "subject evaluated twice");
        }
    }
    assert_eq!(seen.len(), cohort.subjects.len());
    assert!(split_fold(&cohort, &plan, plan.k).is_err());
}

#[test]
fn kfold_pools_every_subject_and_round_trips() {
    let cohort = small_cohort(24, 15, 0.0, 6);
    let cfg = small_train(2, 1);
    let report = run_kfold::<f32>(&cohort, &small_model(HeadKind::Mc), &cfg, 3).unwrap();
    assert_eq!(report.n_folds, 13);
    assert_eq!(report.folds.len(), 13);
    assert_eq!(report.pooled.n_subjects, 39);
    assert_eq!(report.subjects.len(), 39);
    assert_eq!(report.pooled.confusion.total(), 39);
    assert_eq!(report.pooled.n_clips, cohort.clips.len());
    for r in report.folds.iter().chain([&report.pooled]) {
        for v in [r.accuracy, r.f1, r.auc, r.sensitivity, r.specificity, r.clip_accuracy].into_iter().flatten() {
            assert!((0.0..=1.0).contains(&v));
        }
    }
    let json = serde_json::to_string(&report).unwrap();
    let back: KFoldReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
}

#[test]
fn checkpoints_restore_identical_predictions() {
    let cohort = small_cohort(3, 2, 0.0, 7);
    let plan = plan_folds(cohort.subjects.len(), 2, 0).unwrap();
    let out = train_fold::<f32>(&cohort, &plan, 0, &small_model(HeadKind::Mc), &small_train(0, 2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &out.model).unwrap();
    let loaded: McVivit32 = load_checkpoint(dir.path()).unwrap();
    let clips: Vec<_> = cohort.clips.iter().collect();
    let a = mcvivit::train::evaluate(&out.model, &clips).unwrap();
    let b = mcvivit::train::evaluate(&loaded, &clips).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&clip_accuracy(&a)));
}
