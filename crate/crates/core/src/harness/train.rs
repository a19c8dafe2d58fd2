//! Mini-batch training and held-out evaluation for one fold.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, ExperimentConfig, OptimizerKind};
use super::loso::PreparedSample;
use crate::diff::{adam_step, sgd_step, AdamState, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{
    loss_b, loss_mc, loss_me, loss_total, loss_wc, CenterMode, LossTerms, LossWeights, StepLosses,
    WeightCenterTable,
};
use crate::model::{DereModel, Variant};

const INIT_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 3;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub centers: Option<WeightCenterTable>,
    pub steps: Vec<StepLosses>,
    /// Mean total loss per completed epoch.
    pub epoch_losses: Vec<f64>,
    pub stopped_early: bool,
}

/// Splits `order` into batches of `batch_size`. A trailing batch of one
/// sample is merged into the previous batch, since the batch-mean losses are
/// degenerate for a single sample.
pub fn make_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(last);
    }
    batches
}

fn stack_flat(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let rows = vars
        .iter()
        .map(|&v| {
            let n = tape.value(v).numel();
            tape.reshape(v, &[1, n])
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat_rows(&rows)
}

/// Forward pass over a batch, returning the loss terms for `variant`, the
/// total, and the stacked `N × dim` action weights when present.
pub fn batch_losses(
    tape: &mut Tape,
    model: &DereModel,
    bindings: &crate::diff::Bindings,
    batch: &[&PreparedSample],
    config: &ExperimentConfig,
    weights: &LossWeights,
    centers: Option<&WeightCenterTable>,
) -> Result<(LossTerms, Var, Option<Var>)> {
    let variant = config.variant;
    let labels: Vec<usize> = batch.iter().map(|s| s.label()).collect();
    let outs = batch
        .iter()
        .map(|s| model.forward(tape, bindings, &s.graph, variant))
        .collect::<Result<Vec<_>>>()?;
    let logits: Vec<Var> = outs.iter().map(|o| o.logits).collect();
    let logits = tape.concat_rows(&logits)?;
    let me = loss_me(tape, logits, &labels)?;
    let mut terms = LossTerms {
        me,
        mc: None,
        wc: None,
        b: None,
    };
    if variant.has_actions() {
        let f_a: Vec<Var> = outs.iter().filter_map(|o| o.f_a).collect();
        let stacked = stack_flat(tape, &f_a)?;
        terms.mc = Some(loss_mc(tape, stacked)?);
    }
    let mut w_batch = None;
    if variant.has_weights() {
        let ws: Vec<Var> = outs.iter().filter_map(|o| o.w).collect();
        let w = stack_flat(tape, &ws)?;
        let table = centers.ok_or_else(|| Error::Config("weight centers missing".into()))?;
        terms.wc = Some(loss_wc(tape, w, &labels, table, config.train.center_mode)?);
        terms.b = Some(loss_b(tape, w)?);
        w_batch = Some(w);
    }
    let total = loss_total(tape, &terms, weights)?;
    Ok((terms, total, w_batch))
}

/// Trains a freshly initialized model on `train`. Deterministic in
/// `(config, seed)`.
pub fn train_fold(
    model: &DereModel,
    train: &[PreparedSample],
    config: &ExperimentConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let tc = &config.train;
    let mut params = model.init_params(derive_seed(seed, &[INIT_STREAM]));
    let mut centers = if config.variant.has_weights() {
        Some(WeightCenterTable::new(
            model.config().num_classes,
            model.config().num_actions_total(),
            tc.center_rate,
        )?)
    } else {
        None
    };
    let mut outcome = TrainOutcome {
        params: ParamStore::new(),
        centers: None,
        steps: Vec::new(),
        epoch_losses: Vec::new(),
        stopped_early: false,
    };
    if tc.epochs > 0 && train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SHUFFLE_STREAM]));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let batches = make_batches(&order, tc.batch_size);
        for batch in &batches {
            let samples: Vec<&PreparedSample> = batch.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let bindings = params.bind(&mut tape);
            let step = outcome.steps.len();
            let (terms, total, w) = batch_losses(&mut tape, model, &bindings, &samples, config, &config.losses, centers.as_ref())
                .map_err(|e| match e {
                    Error::NonFinite(what) => Error::Divergence(format!("epoch {epoch} step {step}: {what} is not finite")),
                    other => other,
                })?;
            tape.backward(total)?;
            params.accumulate_grads(&tape, &bindings);
            let stepped = match tc.optimizer {
                OptimizerKind::Sgd => sgd_step(&mut params, tc.lr, tc.momentum),
                OptimizerKind::Adam => adam_step(&mut params, &mut adam, tc.lr),
            };
            stepped.map_err(|e| match e {
                Error::NonFinite(what) => Error::Divergence(format!("epoch {epoch} step {step}: {what} is not finite")),
                other => other,
            })?;
            if let (Some(table), Some(w), CenterMode::Ema) = (centers.as_mut(), w, tc.center_mode) {
                let labels: Vec<usize> = samples.iter().map(|s| s.label()).collect();
                table.update(tape.value(w), &labels)?;
            }
            let losses = StepLosses::read(&tape, step, &terms, total);
            epoch_sum += losses.total;
            outcome.steps.push(losses);
        }
        let mean = epoch_sum / batches.len() as f64;
        outcome.epoch_losses.push(mean);
        if mean < best * (1.0 - tc.min_rel_improvement) {
            best = mean;
            since_best = 0;
        } else {
            since_best += 1;
            if tc.patience > 0 && since_best >= tc.patience {
                log::debug!("plateau after epoch {epoch}, best mean loss {best:.6}");
                outcome.stopped_early = true;
                break;
            }
        }
    }
    params.zero_grads();
    outcome.params = params;
    outcome.centers = centers;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Manifest index of the sample.
    pub sample: usize,
    pub label: usize,
    pub predicted: usize,
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Predicts every test sample. Parameters are only read.
pub fn evaluate(
    model: &DereModel,
    params: &ParamStore,
    test: &[PreparedSample],
    variant: Variant,
) -> Result<Vec<Prediction>> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    test.iter()
        .map(|s| {
            let logits = model.predict(params, &s.graph, variant)?;
            Ok(Prediction {
                sample: s.source,
                label: s.label(),
                predicted: argmax(&logits),
            })
        })
        .collect()
}

/// Attention maps and action weights of one sample, for inspection.
#[derive(Debug, Clone, Serialize)]
pub struct Explanation {
    pub logits: Vec<f64>,
    pub map_matrices: Option<Vec<Tensor>>,
    pub action_weights: Option<Vec<f64>>,
}

pub fn explain(model: &DereModel, params: &ParamStore, sample: &PreparedSample, variant: Variant) -> Result<Explanation> {
    let mut tape = Tape::new();
    let bound = params.bind_constants(&mut tape);
    let out = model.forward(&mut tape, &bound, &sample.graph, variant)?;
    Ok(Explanation {
        logits: tape.value(out.logits).data().to_vec(),
        map_matrices: out.map_matrices.map(|ms| ms.iter().map(|&m| tape.value(m).clone()).collect()),
        action_weights: out.w.map(|w| tape.value(w).data().to_vec()),
    })
}
