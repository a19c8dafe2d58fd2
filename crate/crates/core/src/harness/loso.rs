//! Leave-one-subject-out folds and per-fold sample preparation.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::config::{derive_seed, ExperimentConfig};
use crate::error::{Error, Result};
use crate::landmark_data::{augment_crop_jitter, magnify, DatasetManifest, LandmarkSample};
use crate::st_graph::{build_graph, NodeSelection, StGraph};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub test_subject: String,
    /// Indices into the manifest.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// One fold per distinct subject, in first-appearance order.
pub fn loso_split(manifest: &DatasetManifest) -> Result<Vec<Fold>> {
    let subjects = manifest.subjects();
    if subjects.len() < 2 {
        return Err(Error::Config(format!(
            "LOSO needs at least 2 subjects, found {}",
            subjects.len()
        )));
    }
    Ok(subjects
        .into_iter()
        .enumerate()
        .map(|(index, subject)| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..manifest.samples.len()).partition(|&i| manifest.samples[i].subject_id == subject);
            Fold {
                index,
                test_subject: subject,
                train,
                test,
            }
        })
        .collect())
}

/// A sample after magnification (and, for training copies, jitter) with its
/// graph.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    /// Manifest index of the source sample.
    pub source: usize,
    /// 0 for the original, `k` for the k-th jittered copy.
    pub copy: usize,
    pub sample: LandmarkSample,
    pub graph: StGraph,
}

impl PreparedSample {
    pub fn label(&self) -> usize {
        self.sample.label
    }
}

#[derive(Debug, Clone)]
pub struct FoldData {
    pub train: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
}

pub fn prepare_sample(
    sample: &LandmarkSample,
    source: usize,
    config: &ExperimentConfig,
    selection: &NodeSelection,
) -> Result<PreparedSample> {
    let magnified = magnify(sample, config.magnification)?;
    Ok(PreparedSample {
        source,
        copy: 0,
        graph: build_graph(&magnified, selection, config.normalize_coordinates)?,
        sample: magnified,
    })
}

/// Magnifies every sample, adds jittered copies of training samples, and
/// builds graphs.
pub fn prepare_fold(
    manifest: &DatasetManifest,
    fold: &Fold,
    config: &ExperimentConfig,
    selection: &NodeSelection,
    fold_seed: u64,
) -> Result<FoldData> {
    let mut train = Vec::with_capacity(fold.train.len() * (1 + config.augment.copies));
    for &i in &fold.train {
        let base = prepare_sample(&manifest.samples[i], i, config, selection)?;
        for copy in 1..=config.augment.copies {
            let seed = derive_seed(fold_seed, &[1, i as u64, copy as u64]);
            let jittered = augment_crop_jitter(&base.sample, &config.augment.jitter, seed)?;
            train.push(PreparedSample {
                source: i,
                copy,
                graph: build_graph(&jittered, selection, config.normalize_coordinates)?,
                sample: jittered,
            });
        }
        train.push(base);
    }
    let test = fold
        .test
        .iter()
        .map(|&i| prepare_sample(&manifest.samples[i], i, config, selection))
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldData { train, test })
}

/// Fails if any training sample (original or augmented) shares a subject or
/// an exact landmark tensor with a test sample.
pub fn check_leakage(data: &FoldData) -> Result<()> {
    let test_subjects: HashSet<&str> = data.test.iter().map(|s| s.sample.subject_id.as_str()).collect();
    let test_tensors: HashSet<Vec<u64>> = data.test.iter().map(|s| s.sample.coordinate_bits()).collect();
    for s in &data.train {
        if test_subjects.contains(s.sample.subject_id.as_str()) {
            return Err(Error::Invariant(format!(
                "training sample {} belongs to held-out subject {}",
                s.source, s.sample.subject_id
            )));
        }
        if test_tensors.contains(&s.sample.coordinate_bits()) {
            return Err(Error::Invariant(format!(
                "training sample {} (copy {}) duplicates a test landmark tensor",
                s.source, s.copy
            )));
        }
    }
    Ok(())
}
