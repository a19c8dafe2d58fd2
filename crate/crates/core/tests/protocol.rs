mod common;

use common::*;
use dere_grl::diff::ParamStore;
use dere_grl::harness::{
    argmax, check_leakage, derive_seed, compute_metrics, evaluate, loso_split, prepare_fold, run_loso, train_fold, ExperimentConfig,
    F1Mode, FoldData, Prediction, RunReport, TrainConfig,
};
use dere_grl::losses::LossWeights;
use dere_grl::model::{DereModel, Variant};
use dere_grl::st_graph::default_selection;
use dere_grl::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn param_bits(p: &ParamStore) -> Vec<u64> {
    p.flat_values().iter().map(|v| v.to_bits()).collect()
}

/// Report with the wall-clock time removed, for equality checks.
fn timeless(mut r: RunReport) -> String {
    r.wall_time_secs = 0.0;
    serde_json::to_string(&r).unwrap()
}

#[test]
fn folds_partition_samples_by_subject() {
    let m = small_dataset(5, 2, 3);
    let folds = loso_split(&m).unwrap();
    assert_eq!(folds.len(), 5);
    let mut tested = vec![0; m.samples.len()];
    for f in &folds {
        let mut all: Vec<usize> = f.train.iter().chain(&f.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..m.samples.len()).collect::<Vec<_>>());
        for &i in &f.test {
            tested[i] += 1;
            assert_eq!(m.samples[i].subject_id, f.test_subject);
        }
        assert!(f.train.iter().all(|&i| m.samples[i].subject_id != f.test_subject));
    }
    assert!(tested.iter().all(|&c| c == 1));
}

#[test]
fn prepared_folds_pass_leakage_check() {
    let m = small_dataset(4, 2, 1);
    let config = quick_config(Variant::Full, 0);
    for f in loso_split(&m).unwrap() {
        let data = prepare_fold(&m, &f, &config, &default_selection(), 17).unwrap();
        assert_eq!(data.train.len(), f.train.len() * 2);
        check_leakage(&data).unwrap();
    }
}

#[test]
fn leaked_test_sample_is_detected() {
    let m = small_dataset(3, 1, 1);
    let config = quick_config(Variant::Full, 0);
    let f = &loso_split(&m).unwrap()[0];
    let data = prepare_fold(&m, f, &config, &default_selection(), 1).unwrap();
    let mut leaky = FoldData { train: data.train.clone(), test: data.test.clone() };
    leaky.train.push(data.test[0].clone());
    assert!(matches!(check_leakage(&leaky), Err(Error::Invariant(_))));

    // Same coordinates under another subject name still count as leakage.
    let mut renamed = data.test[0].clone();
    renamed.sample.subject_id = "someone-else".into();
    let leaky = FoldData { train: vec![renamed], test: data.test };
    assert!(matches!(check_leakage(&leaky), Err(Error::Invariant(_))));
}

#[test]
fn pooled_accuracy_equals_weighted_fold_accuracy() {
    let out = run_loso(&quick_config(Variant::Full, 5)).unwrap();
    let r = &out.report;
    assert!((r.metrics.accuracy - r.weighted_fold_accuracy()).abs() < 1e-12);
    let n: usize = r.folds.iter().map(|f| f.predictions.len()).sum();
    assert_eq!(n, r.metrics.count);
}

#[test]
fn same_seed_gives_identical_reports() {
    for variant in [Variant::BackboneOnly, Variant::Full] {
        let config = quick_config(variant, 9);
        let a = run_loso(&config).unwrap();
        let mut serial = config.clone();
        serial.parallel_folds = false;
        let b = run_loso(&serial).unwrap();
        let mut a_report = a.report.clone();
        a_report.config.parallel_folds = false;
        assert_eq!(timeless(a_report), timeless(b.report));
        for (p, q) in a.fold_params.iter().zip(&b.fold_params) {
            assert_eq!(param_bits(p), param_bits(q));
        }
    }
}

#[test]
fn random_predictions_score_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let preds: Vec<Prediction> = (0..4000)
        .map(|i| {
            let logits: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
            Prediction { sample: i, label: rng.random_range(0..5), predicted: argmax(&logits) }
        })
        .collect();
    let m = compute_metrics(&preds, 5, F1Mode::Macro).unwrap();
    assert!((m.accuracy - 0.2).abs() < 0.05, "{}", m.accuracy);
    assert!((m.f1 - 0.2).abs() < 0.05, "{}", m.f1);
}

#[test]
fn macro_f1_matches_precision_recall_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let k = rng.random_range(2..6);
        let preds: Vec<Prediction> = (0..60)
            .map(|i| Prediction { sample: i, label: rng.random_range(0..k), predicted: rng.random_range(0..k) })
            .collect();
        let m = compute_metrics(&preds, k, F1Mode::Macro).unwrap();
        let mut sum = 0.0;
        for c in 0..k {
            let tp = preds.iter().filter(|p| p.label == c && p.predicted == c).count() as f64;
            let fp = preds.iter().filter(|p| p.label != c && p.predicted == c).count() as f64;
            let fn_ = preds.iter().filter(|p| p.label == c && p.predicted != c).count() as f64;
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            if precision + recall > 0.0 {
                sum += 2.0 * precision * recall / (precision + recall);
            }
        }
        assert!((m.f1 - sum / k as f64).abs() < 1e-12);
        let micro = compute_metrics(&preds, k, F1Mode::Micro).unwrap();
        assert!((micro.f1 - m.accuracy).abs() < 1e-12);
    }
}

#[test]
fn evaluation_leaves_parameters_untouched() {
    let config = quick_config(Variant::Full, 2);
    let samples = eight_samples(&config);
    let mut mc = config.model.clone();
    mc.num_classes = 4;
    let model = DereModel::new(mc, default_selection()).unwrap();
    let mut cfg = config.clone();
    cfg.train.epochs = 2;
    let trained = train_fold(&model, &samples, &cfg, 1).unwrap();
    let before = param_bits(&trained.params);
    let centers = trained.centers.clone();
    let preds = evaluate(&model, &trained.params, &samples, Variant::Full).unwrap();
    assert_eq!(preds.len(), 8);
    assert_eq!(param_bits(&trained.params), before);
    assert_eq!(trained.centers, centers);
}

#[test]
fn zero_epochs_return_initial_parameters() {
    let mut config = quick_config(Variant::Full, 2);
    config.train.epochs = 0;
    let samples = eight_samples(&config);
    let mut mc = config.model.clone();
    mc.num_classes = 4;
    let model = DereModel::new(mc, default_selection()).unwrap();
    let a = train_fold(&model, &samples, &config, 6).unwrap();
    let b = train_fold(&model, &samples, &config, 6).unwrap();
    assert_eq!(param_bits(&a.params), param_bits(&b.params));
    assert_eq!(param_bits(&a.params), param_bits(&model.init_params(derive_seed(6, &[2]))));
    assert!(a.steps.is_empty());
    let other = train_fold(&model, &samples, &config, 7).unwrap();
    assert_ne!(param_bits(&a.params), param_bits(&other.params));
}

#[test]
fn exploding_learning_rate_is_reported_as_divergence() {
    let mut config = quick_config(Variant::Full, 0);
    config.train = TrainConfig { lr: 1e12, epochs: 50, patience: 0, batch_size: 4, ..TrainConfig::default() };
    let samples = eight_samples(&config);
    let mut mc = config.model.clone();
    mc.num_classes = 4;
    let model = DereModel::new(mc, default_selection()).unwrap();
    match train_fold(&model, &samples, &config, 0) {
        Err(Error::Divergence(msg)) => assert!(msg.contains("not finite"), "{msg}"),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.epoch_losses)),
    }
}

#[test]
fn classification_loss_alone_fits_eight_samples() {
    let config = ExperimentConfig {
        variant: Variant::Full,
        losses: LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 },
        train: TrainConfig { epochs: 500, patience: 0, batch_size: 8, ..TrainConfig::default() },
        ..ExperimentConfig::default()
    };
    let samples = eight_samples(&config);
    let mut mc = config.model.clone();
    mc.num_classes = 4;
    let model = DereModel::new(mc, default_selection()).unwrap();
    let trained = train_fold(&model, &samples, &config, 0).unwrap();
    let preds = evaluate(&model, &trained.params, &samples, Variant::Full).unwrap();
    let correct = preds.iter().filter(|p| p.label == p.predicted).count();
    assert_eq!(correct, 8, "final loss {:?}", trained.epoch_losses.last());
}
