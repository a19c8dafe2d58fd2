//! Experiment configuration, LOSO training and evaluation, ablations, and
//! reports.

mod config;
pub mod gradcheck_suite;
mod loso;
mod metrics;
mod run;
mod train;

pub use config::{derive_seed, AugmentConfig, DatasetSpec, ExperimentConfig, F1Mode, OptimizerKind, TrainConfig};
pub use loso::{check_leakage, loso_split, prepare_fold, prepare_sample, Fold, FoldData, PreparedSample};
pub use metrics::{compute_metrics, confusion_matrix, Metrics};
pub use run::{
    run_ablation, run_loso, run_loso_on, write_ablation_dir, write_run_dir, AblationReport, AblationRow, FoldReport,
    RunOutcome, RunReport,
};
pub use train::{argmax, batch_losses, evaluate, explain, make_batches, train_fold, Explanation, Prediction, TrainOutcome};
