//! Central-difference checks of every differentiable op, every loss, and the
//! end-to-end model, over several random instances.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::ExperimentConfig;
use super::loso::{prepare_sample, PreparedSample};
use super::train::batch_losses;
use crate::diff::{grad_check, grad_check_many, CustomOp, GradCheckReport, Tape, Tensor, Var};
use crate::error::Result;
use crate::landmark_data::{synthesize_dataset, SynthSpec};
use crate::losses::{loss_b, loss_mc, loss_me, loss_wc_with_centers, WeightCenterTable};
use crate::model::{DereModel, ModelConfig, Variant};
use crate::st_graph::default_selection;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckCase {
    pub name: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

/// Reduces `y` to a scalar whose gradient depends on every entry of `y`.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let target = tape.constant(random_matrix(&mut rng, shape[0], shape[1]));
    let d = tape.sub(y, target)?;
    tape.sq_frobenius(d)
}

type Unary = fn(&mut Tape, Var) -> Result<Var>;

/// Every tape op on random inputs.
pub fn op_checks(seed: u64) -> Result<Vec<CheckCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let mut push = |name: &str, report: GradCheckReport| {
        cases.push(CheckCase {
            name: name.to_string(),
            seed,
            report,
        })
    };
    let x = random_matrix(&mut rng, 4, 3);
    let unary: [(&str, Unary); 9] = [
        ("scale", |t, v| t.scale(v, -1.7)),
        ("relu", |t, v| t.relu(v)),
        ("softmax_rows", |t, v| t.softmax_rows(v)),
        ("l1_rowsum", |t, v| t.l1_rowsum(v)),
        ("mean_rows", |t, v| t.mean_rows(v)),
        ("transpose", |t, v| t.transpose(v)),
        ("reshape", |t, v| t.reshape(v, &[2, 6])),
        ("gather_rows", |t, v| t.gather_rows(v, &[2, 0, 2, 3])),
        ("l1_then_normalize_sum", |t, v| {
            let s = t.l1_rowsum(v)?;
            t.normalize_sum(s)
        }),
    ];
    for (name, op) in unary {
        push(
            name,
            grad_check(
                |t, v| {
                    let y = op(t, v)?;
                    probe(t, y, seed)
                },
                &x,
                STEP,
                TOLERANCE,
            )?,
        );
    }
    push("sq_frobenius", grad_check(|t, v| t.sq_frobenius(v), &x, STEP, TOLERANCE)?);
    push("sum", grad_check(|t, v| {
        let r = t.relu(v)?;
        let s = t.sq_frobenius(r)?;
        let y = t.sum(v)?;
        t.add(s, y)
    }, &x, STEP, TOLERANCE)?);
    let positive = Tensor::matrix(4, 1, (0..4).map(|_| 0.1 + rng.random::<f64>()).collect())?;
    push("normalize_sum", grad_check(|t, v| {
        let y = t.normalize_sum(v)?;
        probe(t, y, seed)
    }, &positive, STEP, TOLERANCE)?);

    let a = random_matrix(&mut rng, 3, 4);
    let b = random_matrix(&mut rng, 4, 2);
    push("matmul", grad_check_many(|t, v| {
        let y = t.matmul(v[0], v[1])?;
        probe(t, y, seed)
    }, &[a, b], STEP, TOLERANCE)?);
    let p = random_matrix(&mut rng, 3, 2);
    let q = random_matrix(&mut rng, 3, 2);
    push("add", grad_check_many(|t, v| {
        let y = t.add(v[0], v[1])?;
        probe(t, y, seed)
    }, &[p.clone(), q.clone()], STEP, TOLERANCE)?);
    push("sub", grad_check_many(|t, v| {
        let y = t.sub(v[0], v[1])?;
        probe(t, y, seed)
    }, &[p.clone(), q.clone()], STEP, TOLERANCE)?);
    let bias = random_matrix(&mut rng, 1, 2);
    push("add_bias", grad_check_many(|t, v| {
        let y = t.add_bias(v[0], v[1])?;
        probe(t, y, seed)
    }, &[p.clone(), bias], STEP, TOLERANCE)?);
    let r = random_matrix(&mut rng, 2, 2);
    push("concat_rows", grad_check_many(|t, v| {
        let y = t.concat_rows(&[v[0], v[1]])?;
        probe(t, y, seed)
    }, &[p.clone(), r], STEP, TOLERANCE)?);
    let c = random_matrix(&mut rng, 3, 1);
    push("concat_cols", grad_check_many(|t, v| {
        let y = t.concat_cols(&[v[0], v[1]])?;
        probe(t, y, seed)
    }, &[p, c], STEP, TOLERANCE)?);
    let logits = random_matrix(&mut rng, 5, 4);
    let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
    push("softmax_cross_entropy", grad_check(|t, v| t.softmax_cross_entropy(v, &labels), &logits, STEP, TOLERANCE)?);
    Ok(cases)
}

/// Each loss term against its inputs on random instances.
pub fn loss_checks(seed: u64) -> Result<Vec<CheckCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let mut cases = Vec::new();
    let n = 6;
    let labels: Vec<usize> = (0..n).map(|i| (i + rng.random_range(0..3)) % 3).collect();
    let logits = random_matrix(&mut rng, n, 3);
    let report = grad_check(|t, v| loss_me(t, v, &labels), &logits, STEP, TOLERANCE)?;
    cases.push(CheckCase { name: "L_ME".into(), seed, report });

    let f_a = random_matrix(&mut rng, n, 8);
    let report = grad_check(loss_mc, &f_a, STEP, TOLERANCE)?;
    cases.push(CheckCase { name: "L_MC".into(), seed, report });

    let w = random_matrix(&mut rng, n, 6);
    let mut table = WeightCenterTable::new(3, 6, 0.5)?;
    for c in &mut table.centers {
        c.iter_mut().for_each(|x| *x += 0.1 * rng.sample::<f64, _>(StandardNormal));
    }
    let centers = table.gather(&labels);
    let report = grad_check(|t, v| loss_wc_with_centers(t, v, centers.clone()), &w, STEP, TOLERANCE)?;
    cases.push(CheckCase { name: "L_WC".into(), seed, report });

    let report = grad_check(loss_b, &w, STEP, TOLERANCE)?;
    cases.push(CheckCase { name: "L_B".into(), seed, report });
    Ok(cases)
}

/// Small model used for end-to-end checks.
pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        backbone_channels: vec![4, 4],
        n_actions: 2,
        c2: 3,
        num_classes: 3,
        ..ModelConfig::default()
    }
}

/// Total loss of a 3-sample batch with respect to every model parameter.
pub fn model_check(seed: u64, variant: Variant) -> Result<CheckCase> {
    let config = ExperimentConfig {
        variant,
        model: small_model_config(),
        ..ExperimentConfig::default()
    };
    let manifest = synthesize_dataset(&SynthSpec {
        classes: 3,
        subjects: 2,
        per_subject: 1,
        seed,
        ..SynthSpec::default()
    })?;
    let selection = default_selection();
    let samples: Vec<PreparedSample> = manifest.samples[..3]
        .iter()
        .enumerate()
        .map(|(i, s)| prepare_sample(s, i, &config, &selection))
        .collect::<Result<_>>()?;
    let batch: Vec<&PreparedSample> = samples.iter().collect();
    let model = DereModel::new(config.model.clone(), selection)?;
    let mut params = model.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(77));
    // Zero-initialized biases put ReLU inputs exactly on the kink for nodes
    // whose inputs vanish; check at a generic point instead.
    let names: Vec<String> = params.names().to_vec();
    for name in names.iter().filter(|n| n.ends_with("bias")) {
        let mut b = params.value(name)?.clone();
        b.data_mut().iter_mut().for_each(|x| *x = 0.1 * rng.sample::<f64, _>(StandardNormal));
        params.set_value(name, b)?;
    }
    let mut table = WeightCenterTable::new(3, config.model.num_actions_total(), 0.5)?;
    for c in &mut table.centers {
        c.iter_mut().for_each(|x| *x += 0.05 * rng.sample::<f64, _>(StandardNormal));
    }
    let inputs: Vec<Tensor> = params.iter().map(|(_, p)| p.value.clone()).collect();
    let report = grad_check_many(
        |tape, vars| {
            let bindings = params.bind_vars(vars.to_vec())?;
            let (_, total, _) = batch_losses(tape, &model, &bindings, &batch, &config, &config.losses, Some(&table))?;
            Ok(total)
        },
        &inputs,
        STEP,
        TOLERANCE,
    )?;
    Ok(CheckCase {
        name: format!("model[{}]", variant.label()),
        seed,
        report,
    })
}

/// Elementwise square whose backward deliberately returns `x` instead of
/// `2x`. A working checker must reject it.
pub struct WrongSquare;

impl CustomOp for WrongSquare {
    fn name(&self) -> &'static str {
        "wrong_square"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * v).collect())
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>> {
        vec![inputs[0].data().iter().zip(grad_out).map(|(x, g)| x * g).collect()]
    }
}

pub fn negative_control(seed: u64) -> Result<CheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_matrix(&mut rng, 3, 3);
    let report = grad_check(
        |t, v| {
            let y = t.custom(Arc::new(WrongSquare), &[v])?;
            t.sum(y)
        },
        &x,
        STEP,
        TOLERANCE,
    )?;
    Ok(CheckCase {
        name: "negative_control[wrong_square]".into(),
        seed,
        report,
    })
}

/// Ops, losses, and all three model variants for every seed.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<CheckCase>> {
    let mut all = Vec::new();
    for &seed in seeds {
        all.extend(op_checks(seed)?);
        all.extend(loss_checks(seed)?);
        for v in Variant::ALL {
            all.push(model_check(seed, v)?);
        }
    }
    Ok(all)
}
