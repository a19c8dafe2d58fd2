//! Landmark-triplet samples: validation, JSON-lines I/O, displacement
//! magnification, crop-jitter augmentation, and synthetic datasets.

mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{mean_face, synthesize_dataset, ClassPattern, SynthSpec, CLASS_PATTERNS};

pub const NUM_LANDMARKS: usize = 68;
pub const NUM_FRAMES: usize = 3;

pub type Point = [f64; 2];

/// One frame of the 68-point annotation layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkFrame {
    pub points: Vec<Point>,
}

impl LandmarkFrame {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.points.len() != NUM_LANDMARKS {
            return Err(format!(
                "{} points, expected {NUM_LANDMARKS}",
                self.points.len()
            ));
        }
        if let Some(i) = self
            .points
            .iter()
            .position(|p| !p[0].is_finite() || !p[1].is_finite())
        {
            return Err(format!("point {i} is not finite"));
        }
        Ok(())
    }
}

/// Onset, apex and offset landmarks of one micro-expression clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSample {
    #[serde(rename = "subject")]
    pub subject_id: String,
    pub label: usize,
    pub frames: Vec<LandmarkFrame>,
}

impl LandmarkSample {
    pub fn onset(&self) -> &LandmarkFrame {
        &self.frames[0]
    }

    pub fn apex(&self) -> &LandmarkFrame {
        &self.frames[1]
    }

    /// Checks frame count, point counts and finiteness. `name` identifies the
    /// sample in the error.
    pub fn validate(&self, name: &str) -> Result<()> {
        let fail = |message: String| Error::Validation {
            sample: name.to_string(),
            message,
        };
        if self.frames.len() != NUM_FRAMES {
            return Err(fail(format!(
                "{} frames, expected {NUM_FRAMES}",
                self.frames.len()
            )));
        }
        for (t, f) in self.frames.iter().enumerate() {
            f.validate().map_err(|m| fail(format!("frame {t}: {m}")))?;
        }
        Ok(())
    }

    /// All coordinates, frame-major, as raw bits. Equal bits means an
    /// identical landmark tensor.
    pub fn coordinate_bits(&self) -> Vec<u64> {
        self.frames
            .iter()
            .flat_map(|f| f.points.iter().flat_map(|p| [p[0].to_bits(), p[1].to_bits()]))
            .collect()
    }

    fn map_points(&self, f: impl Fn(usize, usize, Point) -> Point) -> Result<Self> {
        let frames = self
            .frames
            .iter()
            .enumerate()
            .map(|(t, fr)| {
                LandmarkFrame::new(fr.points.iter().enumerate().map(|(i, p)| f(t, i, *p)).collect())
            })
            .collect();
        let out = Self {
            subject_id: self.subject_id.clone(),
            label: self.label,
            frames,
        };
        if out.frames.iter().any(|fr| fr.validate().is_err()) {
            return Err(Error::NonFinite(format!(
                "transformed landmarks of subject {}",
                self.subject_id
            )));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Ingested,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<LandmarkSample>,
    pub class_names: Vec<String>,
    pub source: DatasetSource,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Distinct subjects in first-appearance order.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.samples
            .iter()
            .filter(|s| seen.insert(s.subject_id.clone()))
            .map(|s| s.subject_id.clone())
            .collect()
    }

    /// Classes observed in fewer than two distinct subjects.
    pub fn degenerate_classes(&self) -> Vec<usize> {
        let mut subjects: BTreeMap<usize, BTreeSet<&str>> = BTreeMap::new();
        for s in &self.samples {
            subjects.entry(s.label).or_default().insert(&s.subject_id);
        }
        (0..self.num_classes())
            .filter(|c| subjects.get(c).map_or(0, BTreeSet::len) < 2)
            .collect()
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes()];
        for s in &self.samples {
            h[s.label] += 1;
        }
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for s in &self.samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn generic_class_names(k: usize) -> Vec<String> {
    (0..k).map(|c| format!("class{c}")).collect()
}

/// Reads a JSON-lines dataset, one sample per line. Blank lines are skipped.
///
/// The class count is one past the largest label; class names are generic.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: LandmarkSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        sample.validate(&format!("line {} (subject {})", i + 1, sample.subject_id))?;
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    let manifest = DatasetManifest {
        samples,
        class_names: generic_class_names(k.max(2)),
        source: DatasetSource::Ingested,
    };
    let degenerate = manifest.degenerate_classes();
    if !degenerate.is_empty() {
        log::warn!("classes {degenerate:?} appear in fewer than two subjects; LOSO is degenerate for them");
    }
    Ok(manifest)
}

/// Scales apex and offset displacements about the onset frame by `alpha`.
pub fn magnify(sample: &LandmarkSample, alpha: f64) -> Result<LandmarkSample> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("magnification factor {alpha} must be positive")));
    }
    let onset = sample.frames[0].points.clone();
    sample.map_points(|t, i, p| {
        if t == 0 {
            p
        } else {
            let o = onset[i];
            [o[0] + alpha * (p[0] - o[0]), o[1] + alpha * (p[1] - o[1])]
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    /// Maximum absolute translation per axis, in pixels.
    pub max_translate: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            scale_min: 0.95,
            scale_max: 1.05,
            max_translate: 3.0,
        }
    }
}

/// Applies `p ↦ scale·p + translate` to every point of every frame.
pub fn apply_similarity(sample: &LandmarkSample, scale: f64, translate: Point) -> Result<LandmarkSample> {
    sample.map_points(|_, _, p| [scale * p[0] + translate[0], scale * p[1] + translate[1]])
}

/// Random uniform-scale and translation applied identically to all three
/// frames, standing in for the detector's sensitivity to crop size.
pub fn augment_crop_jitter(sample: &LandmarkSample, jitter: &JitterConfig, seed: u64) -> Result<LandmarkSample> {
    if !(jitter.scale_min > 0.0 && jitter.scale_min <= jitter.scale_max && jitter.max_translate >= 0.0) {
        return Err(Error::Config(format!("invalid jitter {jitter:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = if jitter.scale_min == jitter.scale_max {
        jitter.scale_min
    } else {
        rng.random_range(jitter.scale_min..=jitter.scale_max)
    };
    let mut offset = || {
        if jitter.max_translate == 0.0 {
            0.0
        } else {
            rng.random_range(-jitter.max_translate..=jitter.max_translate)
        }
    };
    let translate = [offset(), offset()];
    apply_similarity(sample, scale, translate)
}
