//! One test per acceptance criterion. Each prints a single PASS/FAIL line
//! and then asserts it.

mod common;

use std::time::Instant;

use common::*;
use dere_grl::diff::{ParamStore, Tape, Tensor};
use dere_grl::harness::gradcheck_suite::{negative_control, run_suite};
use dere_grl::harness::{
    check_leakage, evaluate, loso_split, prepare_fold, run_ablation, run_loso, train_fold, DatasetSpec,
    ExperimentConfig, TrainConfig,
};
use dere_grl::landmark_data::{load_manifest, synthesize_dataset, SynthSpec};
use dere_grl::losses::{loss_b, loss_mc, loss_me, loss_total, loss_wc, CenterMode, LossTerms, LossWeights, WeightCenterTable};
use dere_grl::model::{DereModel, ModelConfig, Variant};
use dere_grl::st_graph::{default_selection, split_components, NUM_NODES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    println!("criterion {n} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn bits(p: &ParamStore) -> Vec<u64> {
    p.flat_values().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let seeds = [0, 1, 2, 3, 4];
    let cases = run_suite(&seeds).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = cases
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .unwrap();
    let failed: Vec<String> = cases
        .iter()
        .filter(|c| !c.report.passed())
        .map(|c| format!("{}@{}", c.name, c.seed))
        .collect();
    let models = cases.iter().filter(|c| c.name.starts_with("model")).count();
    let control = negative_control(0).unwrap();
    let pass = failed.is_empty() && models == 15 && !control.report.passed() && secs < 60.0;
    verdict(
        1,
        "gradient correctness",
        pass,
        &format!(
            "{} checks over {} seeds, worst rel err {:.2e} ({}), failures {:?}, wrong-backward control rejected: {}, {:.1}s",
            cases.len(),
            seeds.len(),
            worst.report.max_rel_error,
            worst.name,
            failed,
            !control.report.passed(),
            secs
        ),
    );
}

#[test]
fn criterion_2_shape_fidelity() {
    let config = ModelConfig::default();
    let (n_a, c1) = (config.n_actions, config.c1());
    let model = DereModel::new(config, default_selection()).unwrap();
    let mut problems = Vec::new();
    let mut worst_row = 0.0f64;
    for seed in 0..10 {
        let params = random_params(&model, seed);
        let graph = random_graph(seed + 1000);
        let mut tape = Tape::new();
        let b = params.bind_constants(&mut tape);
        let out = model.forward(&mut tape, &b, &graph, Variant::Full).unwrap();
        let expect = |problems: &mut Vec<String>, what: &str, got: &[usize], want: &[usize]| {
            if got != want {
                problems.push(format!("{what} {got:?} != {want:?}"));
            }
        };
        expect(&mut problems, "X_B", tape.shape(out.x_b), &[NUM_NODES, c1]);
        for (m, n_f) in out.map_matrices.unwrap().iter().zip([10, 9, 12]) {
            let t = tape.value(*m);
            expect(&mut problems, "M_A", t.shape(), &[n_f, n_a]);
            for r in 0..t.rows() {
                worst_row = worst_row.max((t.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
        expect(&mut problems, "F_A", tape.shape(out.f_a.unwrap()), &[3 * n_a, c1]);
        expect(&mut problems, "W", tape.shape(out.w.unwrap()), &[3 * n_a, 1]);
        expect(&mut problems, "F_ME", tape.shape(out.f_me.unwrap()), &[1, c1]);
        let x_b = tape.value(out.x_b).clone();
        let parts = split_components(&x_b, model.selection()).unwrap();
        expect(&mut problems, "split", &[parts[0].rows(), parts[1].rows(), parts[2].rows()], &[10, 9, 12]);
    }
    let pass = problems.is_empty() && worst_row <= 1e-9;
    verdict(
        2,
        "shape fidelity",
        pass,
        &format!("10 random instances, max |row sum - 1| {worst_row:.1e}, mismatches {problems:?}"),
    );
}

#[test]
fn criterion_3_oracle_equivalence() {
    const TOL: f64 = 1e-10;
    let model = DereModel::new(
        ModelConfig { backbone_channels: vec![8, 8], c2: 6, ..ModelConfig::default() },
        default_selection(),
    )
    .unwrap();
    let (rows, c1) = (model.config().num_actions_total(), model.config().c1());
    let mut worst = [0.0f64; 6];
    for seed in 0..20u64 {
        let params = random_params(&model, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_b = random_mat(&mut rng, NUM_NODES, c1);
        let f_a = random_mat(&mut rng, rows, c1);
        let mut tape = Tape::new();
        let b = params.bind_constants(&mut tape);
        let xv = tape.constant(from_mat(&x_b));
        let (maps, fa) = model.adm_forward(&mut tape, &b, xv).unwrap();
        let (maps_o, fa_o) = adm_oracle(&model, &params, &x_b);
        let mut adm_err = max_abs(&to_mat(tape.value(fa)), &fa_o);
        for (m, o) in maps.iter().zip(&maps_o) {
            adm_err = adm_err.max(max_abs(&to_mat(tape.value(*m)), o));
        }
        worst[0] = worst[0].max(adm_err);

        let fv = tape.constant(from_mat(&f_a));
        let (f_me, w) = model.rrm_forward(&mut tape, &b, fv).unwrap();
        let (f_me_o, w_o) = rrm_oracle(&model, &params, &f_a);
        let w_col: Mat = w_o.iter().map(|&v| vec![v]).collect();
        worst[1] = worst[1]
            .max(max_abs(&to_mat(tape.value(f_me)), &vec![f_me_o]))
            .max(max_abs(&to_mat(tape.value(w)), &w_col));

        let n = rng.random_range(2..10);
        let k = rng.random_range(2..7);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let logits = random_mat(&mut rng, n, k);
        let feats = random_mat(&mut rng, n, rows * c1);
        let ws = random_mat(&mut rng, n, rows);
        let mut table = WeightCenterTable::new(k, rows, 0.5).unwrap();
        table.centers = random_mat(&mut rng, k, rows);
        let mut tape = Tape::new();
        let lv = tape.constant(from_mat(&logits));
        let fv = tape.constant(from_mat(&feats));
        let wv = tape.constant(from_mat(&ws));
        let me = loss_me(&mut tape, lv, &labels).unwrap();
        let mc = loss_mc(&mut tape, fv).unwrap();
        let wc = loss_wc(&mut tape, wv, &labels, &table, CenterMode::Ema).unwrap();
        let lb = loss_b(&mut tape, wv).unwrap();
        let pairs = [
            (me, loss_me_oracle(&logits, &labels)),
            (mc, loss_mc_oracle(&feats)),
            (wc, loss_wc_oracle(&ws, &labels, &table.centers)),
            (lb, loss_b_oracle(&ws)),
        ];
        for (i, (v, o)) in pairs.iter().enumerate() {
            worst[2 + i] = worst[2 + i].max((tape.value(*v).item() - o).abs());
        }
    }
    let pass = worst.iter().all(|&e| e < TOL);
    verdict(
        3,
        "oracle equivalence",
        pass,
        &format!(
            "20 instances each, max abs diff ADM {:.1e}, RRM {:.1e}, L_ME {:.1e}, L_MC {:.1e}, L_WC {:.1e}, L_B {:.1e}",
            worst[0], worst[1], worst[2], worst[3], worst[4], worst[5]
        ),
    );
}

#[test]
fn criterion_4_analytic_zero_cases() {
    let mut tape = Tape::new();
    let row = vec![0.3, -1.2, 4.0, 0.5];
    let same = tape.constant(Tensor::from_rows(&[row.clone(), row.clone(), row]).unwrap());
    let mc = loss_mc(&mut tape, same).unwrap();
    let mc = tape.value(mc).item();

    let mut table = WeightCenterTable::new(2, 3, 0.5).unwrap();
    table.centers = vec![vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]];
    let labels = [1, 0, 1];
    let at_centers = tape.constant(table.gather(&labels));
    let wc = loss_wc(&mut tape, at_centers, &labels, &table, CenterMode::Ema).unwrap();
    let wc = tape.value(wc).item();

    let balanced = tape.constant(Tensor::from_rows(&[vec![0.5, 0.1, 0.4], vec![0.1, 0.4, 0.1], vec![0.4, 0.5, 0.5]]).unwrap());
    let b = loss_b(&mut tape, balanced).unwrap();
    let b = tape.value(b).item();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = tape.constant(from_mat(&random_mat(&mut rng, 3, 4)));
    let me = loss_me(&mut tape, logits, &[0, 3, 2]).unwrap();
    let wv = tape.constant(from_mat(&random_mat(&mut rng, 3, 3)));
    let fv = tape.constant(from_mat(&random_mat(&mut rng, 3, 5)));
    let terms = LossTerms {
        me,
        mc: Some(loss_mc(&mut tape, fv).unwrap()),
        wc: Some(loss_wc(&mut tape, wv, &labels, &table, CenterMode::Ema).unwrap()),
        b: Some(loss_b(&mut tape, wv).unwrap()),
    };
    let zero = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 };
    let total = loss_total(&mut tape, &terms, &zero).unwrap();
    let total_gap = (tape.value(total).item() - tape.value(me).item()).abs();

    let mut uniform_gap = 0.0f64;
    for k in [2usize, 3, 5, 7] {
        let flat = tape.constant(Tensor::full(&[4, k], 0.37));
        let l = loss_me(&mut tape, flat, &[0, 1, k - 1, 0]).unwrap();
        uniform_gap = uniform_gap.max((tape.value(l).item() - (k as f64).ln()).abs());
    }
    let pass = mc == 0.0 && wc == 0.0 && b.abs() < 1e-30 && total_gap == 0.0 && uniform_gap <= 1e-12;
    verdict(
        4,
        "analytic zero cases",
        pass,
        &format!("L_MC {mc:e}, L_WC {wc:e}, L_B {b:e}, |total - L_ME| {total_gap:e}, |L_ME - ln K| {uniform_gap:.1e}"),
    );
}

#[test]
fn criterion_5_capacity_sanity() {
    let start = Instant::now();
    let config = ExperimentConfig {
        variant: Variant::Full,
        train: TrainConfig { epochs: 500, patience: 0, batch_size: 8, ..TrainConfig::default() },
        ..ExperimentConfig::default()
    };
    let samples = eight_samples(&config);
    let mut mc = config.model.clone();
    mc.num_classes = 4;
    let model = DereModel::new(mc, default_selection()).unwrap();
    let a = train_fold(&model, &samples, &config, 0).unwrap();
    let b = train_fold(&model, &samples, &config, 0).unwrap();
    let deterministic = bits(&a.params) == bits(&b.params);
    let preds = evaluate(&model, &a.params, &samples, Variant::Full).unwrap();
    let correct = preds.iter().filter(|p| p.label == p.predicted).count();
    let secs = start.elapsed().as_secs_f64();
    let last = a.steps.last().unwrap();
    let pass = correct == 8 && deterministic && secs < 120.0;
    verdict(
        5,
        "capacity sanity",
        pass,
        &format!(
            "full variant, default loss weights: {correct}/8 train samples correct after 500 epochs \
             (final L_ME {:.4}, L_MC {:.2e}), deterministic {deterministic}, {secs:.1}s",
            last.me, last.mc
        ),
    );
}

#[test]
fn criterion_6_synthetic_loso_ablation() {
    let start = Instant::now();
    let seeds = [0u64, 1, 2, 3, 4];
    let mut rows = Vec::new();
    for &seed in &seeds {
        let mut accs = [0.0; 2];
        for (i, variant) in [Variant::BackboneOnly, Variant::Full].into_iter().enumerate() {
            let config = ExperimentConfig {
                dataset: DatasetSpec::Synthetic(SynthSpec::default()),
                variant,
                seed,
                train: TrainConfig { epochs: 100, patience: 20, ..TrainConfig::default() },
                ..ExperimentConfig::default()
            };
            accs[i] = run_loso(&config).unwrap().report.metrics.accuracy;
        }
        println!("  seed {seed}: backbone {:.2}%  full {:.2}%", 100.0 * accs[0], 100.0 * accs[1]);
        rows.push(accs);
    }
    let secs = start.elapsed().as_secs_f64();
    let median = |i: usize| {
        let mut v: Vec<f64> = rows.iter().map(|r| r[i]).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (mb, mf) = (median(0), median(1));
    let in_band = (0.60..=0.85).contains(&mb);
    let every = rows.iter().all(|r| r[1] >= r[0] - 0.02);
    let pass = in_band && every && mf >= mb && secs < 900.0;
    verdict(
        6,
        "synthetic LOSO ablation",
        pass,
        &format!(
            "median backbone {:.2}% (band 60-85%: {in_band}), median full {:.2}%, full >= backbone - 2pt in every run: {every}, {secs:.0}s",
            100.0 * mb,
            100.0 * mf
        ),
    );
}

#[test]
fn criterion_7_protocol_integrity() {
    let config = quick_config(Variant::Full, 21);
    let manifest = config.dataset.load().unwrap();
    let folds = loso_split(&manifest).unwrap();
    let mut tested = vec![0usize; manifest.samples.len()];
    let mut partition = true;
    let mut leakage_free = true;
    for f in &folds {
        partition &= f.train.len() + f.test.len() == manifest.samples.len();
        partition &= f.train.iter().all(|&i| manifest.samples[i].subject_id != f.test_subject);
        f.test.iter().for_each(|&i| tested[i] += 1);
        let data = prepare_fold(&manifest, f, &config, &default_selection(), 5).unwrap();
        leakage_free &= check_leakage(&data).is_ok();
    }
    partition &= tested.iter().all(|&c| c == 1);

    let a = run_loso(&config).unwrap();
    let b = run_loso(&config).unwrap();
    let identity_gap = (a.report.metrics.accuracy - a.report.weighted_fold_accuracy()).abs();
    let strip = |r: &dere_grl::harness::RunReport| {
        let mut r = r.clone();
        r.wall_time_secs = 0.0;
        serde_json::to_string(&r).unwrap()
    };
    let identical = strip(&a.report) == strip(&b.report)
        && a.fold_params.iter().zip(&b.fold_params).all(|(p, q)| bits(p) == bits(q));
    let pass = partition && leakage_free && identity_gap <= 1e-12 && identical;
    verdict(
        7,
        "protocol integrity",
        pass,
        &format!(
            "{} folds partition {} samples: {partition}, leakage-free: {leakage_free}, pooled-acc gap {identity_gap:.1e}, repeat runs identical: {identical}",
            folds.len(),
            manifest.samples.len()
        ),
    );
}

#[test]
fn criterion_8_format_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synthesize_dataset(&SynthSpec::default()).unwrap();
    let path = dir.path().join("data.jsonl");
    manifest.save(&path).unwrap();
    let back = load_manifest(&path).unwrap();
    let dataset_exact = back.samples.len() == manifest.samples.len()
        && back.samples.iter().zip(&manifest.samples).all(|(a, b)| {
            a.subject_id == b.subject_id && a.label == b.label && a.coordinate_bits() == b.coordinate_bits()
        });

    let model = DereModel::new(ModelConfig::default(), default_selection()).unwrap();
    let params = random_params(&model, 4);
    let ckpt = dir.path().join("ckpt.json");
    params.save(&ckpt).unwrap();
    let loaded = ParamStore::load(&ckpt).unwrap();
    let checkpoint_exact = loaded.names() == params.names() && bits(&loaded) == bits(&params);

    let mut config = quick_config(Variant::Full, 0);
    config.train.epochs = 2;
    let report = run_ablation(&config).unwrap();
    let text = report.render();
    let module_labels: Vec<&str> = report.module_rows.iter().map(|r| r.label.as_str()).collect();
    let loss_labels: Vec<&str> = report.loss_rows.iter().map(|r| r.label.as_str()).collect();
    let tables = report.module_rows.len() == 3
        && report.loss_rows.len() == 4
        && text.contains("Module ablation")
        && text.contains("Loss ablation")
        && module_labels.iter().chain(&loss_labels).all(|l| text.contains(l));
    let pass = dataset_exact && checkpoint_exact && tables;
    verdict(
        8,
        "format round trips",
        pass,
        &format!(
            "dataset bit-exact: {dataset_exact}, checkpoint bit-exact: {checkpoint_exact}, ablation rows {module_labels:?} / {loss_labels:?}"
        ),
    );
}
