//! Classification loss, the two center losses, the balance loss, and their
//! weighted total.
//!
//! Centers (the batch mean of each action feature, and the per-class weight
//! centers) enter the tape as constants. For the batch-mean center this loses
//! nothing: deviations from a mean sum to zero, so the gradient through the
//! mean vanishes anyway.

use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Mean center loss on action features.
    pub lambda1: f64,
    /// Weight center loss.
    pub lambda2: f64,
    /// Balance loss.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    /// Centers persist across batches and move toward batch class means.
    #[default]
    Ema,
    /// Centers are the current batch's class means.
    BatchRecompute,
}

/// Per-class centers of the action-weight vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightCenterTable {
    pub centers: Vec<Vec<f64>>,
    pub rate: f64,
}

impl WeightCenterTable {
    /// Every center starts at the uniform weight vector.
    pub fn new(num_classes: usize, dim: usize, rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::Config(format!("center update rate {rate} must be in (0, 1]")));
        }
        Ok(Self {
            centers: vec![vec![1.0 / dim as f64; dim]; num_classes],
            rate,
        })
    }

    pub fn dim(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    fn check(&self, w: &Tensor, labels: &[usize]) -> Result<()> {
        if w.rows() != labels.len() || w.cols() != self.dim() {
            return Err(Error::shape(
                "weight_centers",
                format!("W {:?} for {} labels, center dim {}", w.shape(), labels.len(), self.dim()),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= self.centers.len()) {
            return Err(Error::Config(format!("label {l} has no weight center")));
        }
        Ok(())
    }

    /// Rows of centers for each label, as an `N × dim` matrix.
    pub fn gather(&self, labels: &[usize]) -> Tensor {
        let data = labels.iter().flat_map(|&l| self.centers[l].iter().copied()).collect();
        Tensor::matrix(labels.len(), self.dim(), data).expect("labels nonempty")
    }

    /// Per-label batch class means, as an `N × dim` matrix.
    pub fn batch_means(w: &Tensor, labels: &[usize]) -> Tensor {
        let dim = w.cols();
        let mut sums: std::collections::BTreeMap<usize, (Vec<f64>, usize)> = Default::default();
        for (i, &l) in labels.iter().enumerate() {
            let e = sums.entry(l).or_insert_with(|| (vec![0.0; dim], 0));
            e.0.iter_mut().zip(w.row(i)).for_each(|(a, b)| *a += b);
            e.1 += 1;
        }
        let data = labels
            .iter()
            .flat_map(|l| {
                let (s, n) = &sums[l];
                s.iter().map(move |v| v / *n as f64)
            })
            .collect();
        Tensor::matrix(labels.len(), dim, data).expect("labels nonempty")
    }

    /// Moves each class center present in the batch toward that class's batch
    /// mean: `c ← c + rate·(mean − c)`.
    pub fn update(&mut self, w: &Tensor, labels: &[usize]) -> Result<()> {
        self.check(w, labels)?;
        let means = Self::batch_means(w, labels);
        let mut done = vec![false; self.centers.len()];
        for (i, &l) in labels.iter().enumerate() {
            if std::mem::replace(&mut done[l], true) {
                continue;
            }
            for (c, m) in self.centers[l].iter_mut().zip(means.row(i)) {
                *c += self.rate * (m - *c);
            }
        }
        Ok(())
    }
}

/// Mean softmax cross-entropy of `N × K` logits.
pub fn loss_me(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

/// `1/(2N) Σ_n Σ_i ‖F_A^i(n) − c_i‖²` over an `N × D` batch of flattened
/// action features, with `c` the batch mean held constant.
pub fn loss_mc(tape: &mut Tape, f_a: Var) -> Result<Var> {
    let x = tape.value(f_a);
    if !x.is_matrix() {
        return Err(Error::shape("loss_mc", format!("{:?}", x.shape())));
    }
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for row in x.data().chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
    }
    let centers = tape.constant(Tensor::matrix(n, d, mean.repeat(n))?);
    let diff = tape.sub(f_a, centers)?;
    let sq = tape.sq_frobenius(diff)?;
    tape.scale(sq, 1.0 / (2.0 * n as f64))
}

/// `1/N Σ_n ‖W_n − center(l_n)‖²` with the given `N × dim` centers held
/// constant.
pub fn loss_wc_with_centers(tape: &mut Tape, w: Var, centers: Tensor) -> Result<Var> {
    let n = tape.value(w).rows();
    let c = tape.constant(centers);
    let diff = tape.sub(w, c)?;
    let sq = tape.sq_frobenius(diff)?;
    tape.scale(sq, 1.0 / n as f64)
}

/// Weight center loss against `table` (EMA mode) or against the batch's own
/// class means (batch-recompute mode). Does not update the table.
pub fn loss_wc(
    tape: &mut Tape,
    w: Var,
    labels: &[usize],
    table: &WeightCenterTable,
    mode: CenterMode,
) -> Result<Var> {
    table.check(tape.value(w), labels)?;
    let centers = match mode {
        CenterMode::Ema => table.gather(labels),
        CenterMode::BatchRecompute => WeightCenterTable::batch_means(tape.value(w), labels),
    };
    loss_wc_with_centers(tape, w, centers)
}

/// `‖mean_n W_n − 1/dim‖²` over an `N × dim` batch.
pub fn loss_b(tape: &mut Tape, w: Var) -> Result<Var> {
    let x = tape.value(w);
    if !x.is_matrix() {
        return Err(Error::shape("loss_b", format!("{:?}", x.shape())));
    }
    let dim = x.cols();
    let mean = tape.mean_rows(w)?;
    let target = tape.constant(Tensor::full(&[1, dim], 1.0 / dim as f64));
    let diff = tape.sub(mean, target)?;
    tape.sq_frobenius(diff)
}

/// Handles of the individual loss terms. Absent terms contribute nothing.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub me: Var,
    pub mc: Option<Var>,
    pub wc: Option<Var>,
    pub b: Option<Var>,
}

/// `L_ME + λ1·L_MC + λ2·L_WC + λ3·L_B`. A zero weight drops its term from the
/// tape entirely.
pub fn loss_total(tape: &mut Tape, terms: &LossTerms, weights: &LossWeights) -> Result<Var> {
    let parts = [
        ("L_ME", Some(terms.me), 1.0),
        ("L_MC", terms.mc, weights.lambda1),
        ("L_WC", terms.wc, weights.lambda2),
        ("L_B", terms.b, weights.lambda3),
    ];
    for (name, v, _) in parts {
        if let Some(v) = v {
            if !tape.value(v).item().is_finite() {
                return Err(Error::NonFinite(name.to_string()));
            }
        }
    }
    let mut total = terms.me;
    for (_, v, lambda) in &parts[1..] {
        if let (Some(v), true) = (v, *lambda != 0.0) {
            let scaled = tape.scale(*v, *lambda)?;
            total = tape.add(total, scaled)?;
        }
    }
    Ok(total)
}

/// Loss values of one training step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub me: f64,
    pub mc: f64,
    pub wc: f64,
    pub b: f64,
    pub total: f64,
}

impl StepLosses {
    pub const CSV_HEADER: &'static str = "step,L_ME,L_MC,L_WC,L_B,total";

    pub fn read(tape: &Tape, step: usize, terms: &LossTerms, total: Var) -> Self {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        Self {
            step,
            me: tape.value(terms.me).item(),
            mc: get(terms.mc),
            wc: get(terms.wc),
            b: get(terms.b),
            total: tape.value(total).item(),
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.me, self.mc, self.wc, self.b, self.total
        )
    }
}
