use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmark_data::{load_manifest, synthesize_dataset, DatasetManifest, JitterConfig, SynthSpec};
use crate::losses::{CenterMode, LossWeights};
use crate::model::{ModelConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSpec {
    Path(PathBuf),
    Synthetic(SynthSpec),
}

impl DatasetSpec {
    pub fn load(&self) -> Result<DatasetManifest> {
        match self {
            DatasetSpec::Path(p) => load_manifest(p),
            DatasetSpec::Synthetic(spec) => synthesize_dataset(spec),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// SGD with momentum.
    #[default]
    Sgd,
    /// Adam with default moment decay rates; `momentum` is ignored.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without a relative improvement of at
    /// least `min_rel_improvement` in the mean training loss. Zero disables.
    pub patience: usize,
    pub min_rel_improvement: f64,
    pub center_rate: f64,
    pub center_mode: CenterMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Sgd,
            lr: 0.01,
            momentum: 0.9,
            epochs: 300,
            batch_size: 16,
            patience: 30,
            min_rel_improvement: 1e-4,
            center_rate: 0.5,
            center_mode: CenterMode::Ema,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Jittered copies added per training sample. Test samples are never
    /// augmented.
    pub copies: usize,
    pub jitter: JitterConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            copies: 2,
            jitter: JitterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Mode {
    #[default]
    Macro,
    Micro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub variant: Variant,
    pub model: ModelConfig,
    pub losses: LossWeights,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    /// Displacement magnification about the onset frame.
    pub magnification: f64,
    pub normalize_coordinates: bool,
    pub f1: F1Mode,
    pub seed: u64,
    pub parallel_folds: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::Synthetic(SynthSpec::default()),
            variant: Variant::Full,
            model: ModelConfig::default(),
            losses: LossWeights::default(),
            train: TrainConfig::default(),
            augment: AugmentConfig::default(),
            magnification: 3.0,
            normalize_coordinates: true,
            f1: F1Mode::Macro,
            seed: 0,
            parallel_folds: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.losses.validate()?;
        let t = &self.train;
        if !(t.lr >= 0.0 && t.lr.is_finite() && (0.0..1.0).contains(&t.momentum)) {
            return Err(Error::Config(format!("invalid optimizer lr={} momentum={}", t.lr, t.momentum)));
        }
        if t.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.magnification > 0.0) {
            return Err(Error::Config("magnification must be positive".into()));
        }
        Ok(())
    }

    /// Loads the dataset and sets the class count from it.
    pub fn load_dataset(&mut self) -> Result<DatasetManifest> {
        let manifest = self.dataset.load()?;
        self.model.num_classes = manifest.num_classes();
        self.validate()?;
        Ok(manifest)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Mixes a master seed with a stream path into an independent seed
/// (SplitMix64 finalizer applied per component).
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    path.iter().fold(mix(master.wrapping_add(0x9e37_79b9_7f4a_7c15)), |acc, &p| {
        mix(acc ^ p.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019))
    })
}
