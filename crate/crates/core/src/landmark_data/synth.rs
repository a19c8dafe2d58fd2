//! Synthetic landmark-triplet datasets.
//!
//! Faces are a parametric mean shape in unit coordinates (x right, y down,
//! roughly one unit wide). Each subject gets a fixed shape perturbation and a
//! pixel-space placement; each class moves one facial component.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, DatasetSource, LandmarkFrame, LandmarkSample, Point, NUM_LANDMARKS};
use crate::error::{Error, Result};

/// Displacement pattern in unit-face coordinates, at full apex intensity.
pub struct ClassPattern {
    pub name: &'static str,
    pub moves: &'static [(usize, [f64; 2])],
}

/// Patterns are anchored to the eyebrow (17–26), nose (27–35) and outer-lip
/// (48–59) groups.
pub const CLASS_PATTERNS: &[ClassPattern] = &[
    ClassPattern {
        name: "brow_raise",
        moves: &[
            (17, [0.0, -0.008]),
            (18, [0.0, -0.010]),
            (19, [0.0, -0.012]),
            (20, [0.0, -0.013]),
            (21, [0.0, -0.014]),
            (22, [0.0, -0.014]),
            (23, [0.0, -0.013]),
            (24, [0.0, -0.012]),
            (25, [0.0, -0.010]),
            (26, [0.0, -0.008]),
        ],
    },
    ClassPattern {
        name: "lip_corner_pull",
        moves: &[
            (48, [-0.012, -0.010]),
            (49, [-0.006, -0.005]),
            (59, [-0.006, -0.004]),
            (54, [0.012, -0.010]),
            (53, [0.006, -0.005]),
            (55, [0.006, -0.004]),
        ],
    },
    ClassPattern {
        name: "brow_lower",
        moves: &[
            (19, [0.003, 0.006]),
            (20, [0.006, 0.009]),
            (21, [0.009, 0.011]),
            (22, [-0.009, 0.011]),
            (23, [-0.006, 0.009]),
            (24, [-0.003, 0.006]),
        ],
    },
    ClassPattern {
        name: "nose_wrinkle",
        moves: &[
            (28, [0.0, -0.004]),
            (29, [0.0, -0.007]),
            (30, [0.0, -0.009]),
            (31, [-0.004, -0.009]),
            (32, [-0.002, -0.009]),
            (33, [0.0, -0.009]),
            (34, [0.002, -0.009]),
            (35, [0.004, -0.009]),
        ],
    },
    ClassPattern {
        name: "lip_corner_depress",
        moves: &[
            (48, [-0.002, 0.012]),
            (59, [0.0, 0.007]),
            (58, [0.0, 0.004]),
            (54, [0.002, 0.012]),
            (55, [0.0, 0.007]),
            (56, [0.0, 0.004]),
        ],
    },
    ClassPattern {
        name: "jaw_drop",
        moves: &[
            (56, [0.0, 0.010]),
            (57, [0.0, 0.014]),
            (58, [0.0, 0.010]),
            (55, [0.0, 0.005]),
            (59, [0.0, 0.005]),
        ],
    },
    ClassPattern {
        name: "lip_pucker",
        moves: &[
            (48, [0.012, 0.0]),
            (49, [0.006, 0.002]),
            (59, [0.006, -0.002]),
            (54, [-0.012, 0.0]),
            (53, [-0.006, 0.002]),
            (55, [-0.006, -0.002]),
        ],
    },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub classes: usize,
    pub subjects: usize,
    pub per_subject: usize,
    /// Standard deviation of per-point apex noise, in pixels.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Face width in pixels before per-subject scaling.
    pub face_size: f64,
    /// Per-point identity perturbation, in unit-face coordinates.
    pub identity_sigma: f64,
    /// Multiplier on the class displacement patterns.
    pub amplitude: f64,
    /// Per-subject multiplicative spread of expression intensity.
    pub intensity_spread: f64,
    /// Fraction of the apex displacement still present at offset.
    pub offset_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            subjects: 10,
            per_subject: 2,
            noise_sigma: 4.5,
            seed: 7,
            face_size: 200.0,
            identity_sigma: 0.01,
            amplitude: 3.0,
            intensity_spread: 0.3,
            offset_fraction: 0.35,
        }
    }
}

/// The 68-point neutral mean face in unit coordinates.
pub fn mean_face() -> Vec<Point> {
    let mut pts = Vec::with_capacity(NUM_LANDMARKS);
    // jaw 0–16
    for i in 0..17 {
        let phi = PI - PI * i as f64 / 16.0;
        pts.push([0.48 * phi.cos(), -0.05 + 0.5 * phi.sin()]);
    }
    // brows 17–21, 22–26
    for (x0, x1) in [(-0.38, -0.08), (0.08, 0.38)] {
        for k in 0..5 {
            let t = k as f64 / 4.0;
            pts.push([x0 + t * (x1 - x0), -0.28 - 0.05 * (PI * t).sin()]);
        }
    }
    // nose bridge 27–30, base 31–35
    for k in 0..4 {
        pts.push([0.0, -0.2 + 0.07 * k as f64]);
    }
    for (x, y) in [(-0.08, 0.06), (-0.04, 0.075), (0.0, 0.085), (0.04, 0.075), (0.08, 0.06)] {
        pts.push([x, y]);
    }
    // eyes 36–41, 42–47
    for cx in [-0.22, 0.22] {
        for k in 0..6 {
            let a = PI - PI / 3.0 * k as f64;
            pts.push([cx + 0.08 * a.cos(), -0.17 - 0.03 * a.sin()]);
        }
    }
    // outer lip 48–59
    for k in 0..12 {
        let a = PI - PI / 6.0 * k as f64;
        let ry = if a.sin() >= 0.0 { 0.045 } else { 0.055 };
        pts.push([0.18 * a.cos(), 0.225 - ry * a.sin()]);
    }
    // inner lip 60–67
    for k in 0..8 {
        let a = PI - PI / 4.0 * k as f64;
        pts.push([0.12 * a.cos(), 0.225 - 0.02 * a.sin()]);
    }
    debug_assert_eq!(pts.len(), NUM_LANDMARKS);
    pts
}

struct Subject {
    id: String,
    shape: Vec<Point>,
    scale: f64,
    origin: Point,
    intensity: f64,
}

/// Generates `subjects × per_subject × classes` samples, ordered by subject,
/// then class, then repetition. Fully determined by `spec.seed`.
pub fn synthesize_dataset(spec: &SynthSpec) -> Result<DatasetManifest> {
    if spec.classes < 2 || spec.classes > CLASS_PATTERNS.len() {
        return Err(Error::Config(format!(
            "classes must be in 2..={}, got {}",
            CLASS_PATTERNS.len(),
            spec.classes
        )));
    }
    if spec.subjects < 2 {
        return Err(Error::Config(format!("need at least 2 subjects, got {}", spec.subjects)));
    }
    if spec.per_subject == 0 {
        return Err(Error::Config("per_subject must be positive".into()));
    }
    if !(spec.noise_sigma >= 0.0 && spec.identity_sigma >= 0.0 && spec.face_size > 0.0) {
        return Err(Error::Config("noise levels and face size must be nonnegative".into()));
    }
    if !(spec.amplitude > 0.0 && spec.amplitude.is_finite()) {
        return Err(Error::Config("amplitude must be positive".into()));
    }
    if !(0.0..1.0).contains(&spec.intensity_spread) {
        return Err(Error::Config("intensity_spread must be in [0, 1)".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let identity = Normal::new(0.0, spec.identity_sigma).expect("sigma checked");
    let noise = Normal::new(0.0, spec.noise_sigma).expect("sigma checked");
    let base = mean_face();

    let subjects: Vec<Subject> = (0..spec.subjects)
        .map(|s| Subject {
            id: format!("s{:02}", s + 1),
            shape: base
                .iter()
                .map(|p| [p[0] + identity.sample(&mut rng), p[1] + identity.sample(&mut rng)])
                .collect(),
            scale: spec.face_size * rng.random_range(0.85..1.15),
            origin: [rng.random_range(280.0..360.0), rng.random_range(200.0..280.0)],
            intensity: spec.amplitude * (1.0 + spec.intensity_spread * rng.random_range(-1.0..1.0)),
        })
        .collect();

    let mut samples = Vec::with_capacity(spec.subjects * spec.per_subject * spec.classes);
    for subj in &subjects {
        let to_px = |p: Point| [subj.origin[0] + subj.scale * p[0], subj.origin[1] + subj.scale * p[1]];
        let onset: Vec<Point> = subj.shape.iter().map(|&p| to_px(p)).collect();
        for (label, pattern) in CLASS_PATTERNS.iter().take(spec.classes).enumerate() {
            let mut displacement = vec![[0.0; 2]; NUM_LANDMARKS];
            for &(i, d) in pattern.moves {
                displacement[i] = [
                    subj.scale * subj.intensity * d[0],
                    subj.scale * subj.intensity * d[1],
                ];
            }
            for _ in 0..spec.per_subject {
                let apex_disp: Vec<Point> = displacement
                    .iter()
                    .map(|d| [d[0] + noise.sample(&mut rng), d[1] + noise.sample(&mut rng)])
                    .collect();
                let at = |frac: f64| {
                    LandmarkFrame::new(
                        onset
                            .iter()
                            .zip(&apex_disp)
                            .map(|(o, d)| [o[0] + frac * d[0], o[1] + frac * d[1]])
                            .collect(),
                    )
                };
                samples.push(LandmarkSample {
                    subject_id: subj.id.clone(),
                    label,
                    frames: vec![
                        LandmarkFrame::new(onset.clone()),
                        at(1.0),
                        at(spec.offset_fraction),
                    ],
                });
            }
        }
    }

    Ok(DatasetManifest {
        samples,
        class_names: CLASS_PATTERNS[..spec.classes]
            .iter()
            .map(|p| p.name.to_string())
            .collect(),
        source: DatasetSource::Synthetic,
    })
}
