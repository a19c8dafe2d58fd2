//! Full LOSO runs, ablations, and their on-disk reports.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, ExperimentConfig};
use super::loso::{check_leakage, loso_split, prepare_fold, Fold};
use super::metrics::{compute_metrics, Metrics};
use super::train::{evaluate, train_fold, Prediction};
use crate::diff::ParamStore;
use crate::error::{Error, Result};
use crate::landmark_data::DatasetManifest;
use crate::losses::{LossWeights, StepLosses, WeightCenterTable};
use crate::model::{DereModel, Variant};
use crate::st_graph::default_selection;

const FOLD_STREAM: u64 = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub index: usize,
    pub test_subject: String,
    pub train_samples: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub accuracy: f64,
    pub predictions: Vec<Prediction>,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub class_names: Vec<String>,
    pub metrics: Metrics,
    pub folds: Vec<FoldReport>,
    pub wall_time_secs: f64,
}

impl RunReport {
    pub fn predictions(&self) -> impl Iterator<Item = &Prediction> {
        self.folds.iter().flat_map(|f| &f.predictions)
    }

    /// Fold-size-weighted mean of per-fold accuracies.
    pub fn weighted_fold_accuracy(&self) -> f64 {
        let n: usize = self.folds.iter().map(|f| f.predictions.len()).sum();
        self.folds
            .iter()
            .map(|f| f.accuracy * f.predictions.len() as f64)
            .sum::<f64>()
            / n as f64
    }
}

/// Everything a run produces, including the trained parameters.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub fold_params: Vec<ParamStore>,
    pub fold_centers: Vec<Option<WeightCenterTable>>,
    pub fold_steps: Vec<Vec<StepLosses>>,
}

struct FoldResult {
    report: FoldReport,
    params: ParamStore,
    centers: Option<WeightCenterTable>,
    steps: Vec<StepLosses>,
}

fn run_fold(manifest: &DatasetManifest, fold: &Fold, config: &ExperimentConfig, model: &DereModel) -> Result<FoldResult> {
    let seed = derive_seed(config.seed, &[FOLD_STREAM, fold.index as u64]);
    let data = prepare_fold(manifest, fold, config, model.selection(), seed)?;
    check_leakage(&data)?;
    let trained = train_fold(model, &data.train, config, seed)?;
    let predictions = evaluate(model, &trained.params, &data.test, config.variant)?;
    let correct = predictions.iter().filter(|p| p.label == p.predicted).count();
    log::info!(
        "fold {} ({}): {}/{} correct after {} epochs",
        fold.index,
        fold.test_subject,
        correct,
        predictions.len(),
        trained.epoch_losses.len()
    );
    Ok(FoldResult {
        report: FoldReport {
            index: fold.index,
            test_subject: fold.test_subject.clone(),
            train_samples: data.train.len(),
            epochs_run: trained.epoch_losses.len(),
            stopped_early: trained.stopped_early,
            accuracy: correct as f64 / predictions.len() as f64,
            predictions,
            epoch_losses: trained.epoch_losses,
        },
        params: trained.params,
        centers: trained.centers,
        steps: trained.steps,
    })
}

/// Runs LOSO on an already loaded manifest with precomputed folds.
pub fn run_loso_on(manifest: &DatasetManifest, folds: &[Fold], config: &ExperimentConfig) -> Result<RunOutcome> {
    let mut config = config.clone();
    config.model.num_classes = manifest.num_classes();
    config.validate()?;
    let start = Instant::now();
    let model = DereModel::new(config.model.clone(), default_selection())?;
    let results: Vec<FoldResult> = if config.parallel_folds {
        folds
            .par_iter()
            .map(|f| run_fold(manifest, f, &config, &model))
            .collect::<Result<_>>()?
    } else {
        folds
            .iter()
            .map(|f| run_fold(manifest, f, &config, &model))
            .collect::<Result<_>>()?
    };
    let predictions: Vec<Prediction> = results.iter().flat_map(|r| r.report.predictions.clone()).collect();
    let metrics = compute_metrics(&predictions, manifest.num_classes(), config.f1)?;
    let mut outcome = RunOutcome {
        report: RunReport {
            config,
            class_names: manifest.class_names.clone(),
            metrics,
            folds: Vec::with_capacity(results.len()),
            wall_time_secs: 0.0,
        },
        fold_params: Vec::new(),
        fold_centers: Vec::new(),
        fold_steps: Vec::new(),
    };
    for r in results {
        outcome.report.folds.push(r.report);
        outcome.fold_params.push(r.params);
        outcome.fold_centers.push(r.centers);
        outcome.fold_steps.push(r.steps);
    }
    outcome.report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(outcome)
}

/// Loads the configured dataset and runs every LOSO fold.
pub fn run_loso(config: &ExperimentConfig) -> Result<RunOutcome> {
    let mut config = config.clone();
    let manifest = config.load_dataset()?;
    let folds = loso_split(&manifest)?;
    run_loso_on(&manifest, &folds, &config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub variant: Variant,
    pub losses: LossWeights,
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: ExperimentConfig,
    pub module_rows: Vec<AblationRow>,
    pub loss_rows: Vec<AblationRow>,
    pub wall_time_secs: f64,
}

/// Module ablation (three variants) and loss ablation (full model with each
/// auxiliary weight zeroed in turn), all on the same folds and seed.
pub fn run_ablation(config: &ExperimentConfig) -> Result<AblationReport> {
    let start = Instant::now();
    let mut config = config.clone();
    let manifest = config.load_dataset()?;
    let folds = loso_split(&manifest)?;
    let row = |label: &str, variant: Variant, losses: LossWeights| -> Result<AblationRow> {
        let cfg = ExperimentConfig {
            variant,
            losses,
            ..config.clone()
        };
        let m = run_loso_on(&manifest, &folds, &cfg)?.report.metrics;
        log::info!("{label}: acc {:.4} f1 {:.4}", m.accuracy, m.f1);
        Ok(AblationRow {
            label: label.to_string(),
            variant,
            losses,
            accuracy: m.accuracy,
            f1: m.f1,
        })
    };
    let base = config.losses;
    let mut module_rows = Vec::new();
    for v in Variant::ALL {
        module_rows.push(row(v.label(), v, base)?);
    }
    let full = AblationRow {
        label: "L_MC + L_WC + L_B".into(),
        ..module_rows[2].clone()
    };
    let loss_rows = vec![
        full,
        row("L_WC + L_B", Variant::Full, LossWeights { lambda1: 0.0, ..base })?,
        row("L_MC + L_B", Variant::Full, LossWeights { lambda2: 0.0, ..base })?,
        row("L_MC + L_WC", Variant::Full, LossWeights { lambda3: 0.0, ..base })?,
    ];
    Ok(AblationReport {
        config,
        module_rows,
        loss_rows,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

fn table(out: &mut String, title: &str, header: &str, rows: &[AblationRow]) {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(header.len());
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{header:<width$}  {:>7}  {:>6}", "Acc(%)", "F1");
    for r in rows {
        let _ = writeln!(out, "{:<width$}  {:>7.2}  {:>6.4}", r.label, 100.0 * r.accuracy, r.f1);
    }
}

impl AblationReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        table(&mut out, "Module ablation", "Methods", &self.module_rows);
        out.push('\n');
        table(&mut out, "Loss ablation", "Losses", &self.loss_rows);
        out
    }
}

impl RunReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let m = &self.metrics;
        let _ = writeln!(out, "variant: {}", self.config.variant.label());
        let _ = writeln!(out, "seed: {}", self.config.seed);
        let _ = writeln!(out, "samples: {}  folds: {}", m.count, self.folds.len());
        let _ = writeln!(out, "accuracy: {:.2}%", 100.0 * m.accuracy);
        let _ = writeln!(out, "F1 ({:?}): {:.4}", m.f1_mode, m.f1);
        if !m.undefined_f1_classes.is_empty() {
            let _ = writeln!(out, "classes with undefined F1: {:?}", m.undefined_f1_classes);
        }
        out.push('\n');
        let _ = writeln!(out, "{:<12} {:>6} {:>8} {:>8}", "class", "F1", "support", "predicted");
        for (c, f1) in m.per_class_f1.iter().enumerate() {
            let support: usize = m.confusion[c].iter().sum();
            let predicted: usize = m.confusion.iter().map(|r| r[c]).sum();
            let name = self.class_names.get(c).map_or("?", String::as_str);
            let _ = writeln!(out, "{name:<12} {f1:>6.4} {support:>8} {predicted:>8}");
        }
        out.push('\n');
        let _ = writeln!(out, "{:<10} {:>5} {:>7} {:>8}", "subject", "test", "epochs", "acc(%)");
        for f in &self.folds {
            let _ = writeln!(
                out,
                "{:<10} {:>5} {:>7} {:>8.2}",
                f.test_subject,
                f.predictions.len(),
                f.epochs_run,
                100.0 * f.accuracy
            );
        }
        let _ = writeln!(out, "\nwall time: {:.1}s", self.wall_time_secs);
        out
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `config.json`, `report.json`, `report.txt`, `curves.csv`,
/// `folds/<subject>.json`, and `checkpoints/<subject>.json` under `dir`.
pub fn write_run_dir(dir: &Path, outcome: &RunOutcome) -> Result<()> {
    let report = &outcome.report;
    create_dir(&dir.join("folds"))?;
    create_dir(&dir.join("checkpoints"))?;
    write(&dir.join("config.json"), &report.config.to_json_pretty()?)?;
    write(&dir.join("report.json"), &serde_json::to_string_pretty(report)?)?;
    write(&dir.join("report.txt"), &report.render())?;
    let mut curves = format!("fold,{}\n", StepLosses::CSV_HEADER);
    for (fold, steps) in report.folds.iter().zip(&outcome.fold_steps) {
        for s in steps {
            let _ = writeln!(curves, "{},{}", fold.test_subject, s.csv_row());
        }
    }
    write(&dir.join("curves.csv"), &curves)?;
    for (i, fold) in report.folds.iter().enumerate() {
        let name = format!("{}.json", fold.test_subject);
        write(&dir.join("folds").join(&name), &serde_json::to_string_pretty(fold)?)?;
        outcome.fold_params[i].save(&dir.join("checkpoints").join(&name))?;
        if let Some(centers) = &outcome.fold_centers[i] {
            let path = dir.join("checkpoints").join(format!("{}.centers.json", fold.test_subject));
            write(&path, &serde_json::to_string(centers)?)?;
        }
    }
    Ok(())
}

pub fn write_ablation_dir(dir: &Path, report: &AblationReport) -> Result<()> {
    create_dir(dir)?;
    write(&dir.join("config.json"), &report.config.to_json_pretty()?)?;
    write(&dir.join("ablation.json"), &serde_json::to_string_pretty(report)?)?;
    write(&dir.join("ablation.txt"), &report.render())
}
