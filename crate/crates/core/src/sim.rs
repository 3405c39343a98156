//! Deterministic synthetic SLAM evaluator.
//!
//! A scene lists, per frame, the number of static features, and for each
//! semantic class its feature count and the apparent motion (meters/frame)
//! that its features induce when they are trusted. Under a temporal mask:
//!
//! ```text
//! d(t) = Σ_c (1 - M[t,c]) · n_c(t)             unmasked dynamic features
//! u(t) = n_s(t) + d(t)                         usable features
//! u(t) < m_min      → frame untracked, drift unchanged
//! otherwise  ε_t    = Σ_c (1 - M[t,c]) · n_c(t) · b_c(t) / u(t) + η_t
//!            D_t    = D_{t-1} + ε_t
//! ```
//!
//! `η_t` is per-axis zero-mean Gaussian noise with standard deviation
//! `noise_sigma`, seeded by `(seed, t)`. The estimate is `g_t + D_t` on
//! tracked frames; ATE is the RMS of `‖D_t‖` over tracked frames and TR the
//! tracked fraction.
//!
//! The two failure modes this reproduces are drift caused by trusting moving
//! objects that dominate the view, and tracking loss caused by masking so much
//! that too few features remain.

use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::{check_class_names, MaskError, TemporalMask};
use crate::metrics::{rms, tracking_rate, EvalResult, MetricsError, Pose, Trajectory, UsmParams};
use crate::protocol::{read_mask, read_text, write_text, ProtocolError, ResultFile};
use crate::seed::{derive_seed, rng_from_seed};

/// Timestamp spacing of simulated trajectories, seconds.
pub const FRAME_PERIOD: f64 = 1.0 / 30.0;

/// Minimum usable feature count used by generated scenes.
pub const GENERATED_M_MIN: u32 = 30;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("mask has shape {got_frames}×{got_classes}, scene needs {frames}×{classes}")]
    Shape {
        frames: usize,
        classes: usize,
        got_frames: usize,
        got_classes: usize,
    },
    #[error("mask classes {got:?} do not match scene classes {expected:?}")]
    ClassMismatch {
        expected: Vec<String>,
        got: Vec<String>,
    },
    #[error("no optimal-mask oracle for this scene: {0}")]
    OracleUnavailable(String),
    #[error("sequence length {len} is too short for the {profile:?} profile (minimum {min})")]
    TooShort {
        profile: SceneProfile,
        len: usize,
        min: usize,
    },
    #[error("scene JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFrame {
    pub static_count: u32,
    /// One entry per class.
    pub dynamic_counts: Vec<u32>,
    /// One entry per class, meters/frame.
    pub motion_bias: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Still,
    ConsensusInversion,
    ExcessiveMasking,
}

/// Frames `start..end` share one regime.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub kind: PhaseKind,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScript {
    pub sequence_id: String,
    pub class_names: Vec<String>,
    pub m_min: u32,
    pub noise_sigma: f64,
    pub frames: Vec<SceneFrame>,
    pub ground_truth: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub phases: Vec<Phase>,
}

impl SceneScript {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let invalid = |m: String| Err(SimError::InvalidScene(m));
        check_class_names(&self.class_names)?;
        if self.sequence_id.is_empty() {
            return invalid("empty sequence_id".into());
        }
        if self.m_min == 0 {
            return invalid("m_min must be at least 1".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return invalid(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        if self.frames.is_empty() {
            return invalid("scene has no frames".into());
        }
        if self.ground_truth.len() != self.frames.len() {
            return invalid(format!(
                "{} ground-truth positions for {} frames",
                self.ground_truth.len(),
                self.frames.len()
            ));
        }
        let p = self.classes();
        for (t, f) in self.frames.iter().enumerate() {
            if f.dynamic_counts.len() != p || f.motion_bias.len() != p {
                return invalid(format!("frame {t}: per-class arrays must have {p} entries"));
            }
            if f.motion_bias.iter().flatten().any(|v| !v.is_finite()) {
                return invalid(format!("frame {t}: non-finite motion bias"));
            }
        }
        if self.ground_truth.iter().flatten().any(|v| !v.is_finite()) {
            return invalid("non-finite ground truth".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let scene: SceneScript = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scene serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::from_json(&read_text(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), SimError> {
        Ok(write_text(path, &self.to_json())?)
    }

    fn check_mask(&self, mask: &TemporalMask) -> Result<(), SimError> {
        if mask.frames() != self.len() || mask.classes() != self.classes() {
            return Err(SimError::Shape {
                frames: self.len(),
                classes: self.classes(),
                got_frames: mask.frames(),
                got_classes: mask.classes(),
            });
        }
        if mask.class_names() != self.class_names.as_slice() {
            return Err(SimError::ClassMismatch {
                expected: self.class_names.clone(),
                got: mask.class_names().to_vec(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub estimated: Trajectory,
    pub tracked: Vec<bool>,
    pub eval: EvalResult,
}

impl SimOutcome {
    pub fn tracked_frames(&self) -> usize {
        self.tracked.iter().filter(|&&t| t).count()
    }
}

pub fn simulate(
    scene: &SceneScript,
    mask: &TemporalMask,
    seed: u64,
    usm_params: &UsmParams,
) -> Result<SimOutcome, SimError> {
    scene.validate()?;
    scene.check_mask(mask)?;
    let noise = if scene.noise_sigma > 0.0 {
        Some(Normal::new(0.0, scene.noise_sigma).expect("validated sigma"))
    } else {
        None
    };
    let mut drift = Vector3::zeros();
    let mut tracked = Vec::with_capacity(scene.len());
    let mut drift_norms = Vec::new();
    let mut poses = Vec::new();
    for (t, frame) in scene.frames.iter().enumerate() {
        let mut usable = f64::from(frame.static_count);
        let mut pull = Vector3::zeros();
        for (c, (&n, b)) in frame.dynamic_counts.iter().zip(&frame.motion_bias).enumerate() {
            if !mask.get(t, c) {
                usable += f64::from(n);
                pull += f64::from(n) * Vector3::from(*b);
            }
        }
        if usable < f64::from(scene.m_min) {
            tracked.push(false);
            continue;
        }
        let mut step = pull / usable;
        if let Some(dist) = &noise {
            let mut rng = rng_from_seed(derive_seed(seed, t as u64));
            step += Vector3::new(dist.sample(&mut rng), dist.sample(&mut rng), dist.sample(&mut rng));
        }
        drift += step;
        tracked.push(true);
        drift_norms.push(drift.norm());
        poses.push(Pose {
            timestamp: t as f64 * FRAME_PERIOD,
            position: Vector3::from(scene.ground_truth[t]) + drift,
            orientation: UnitQuaternion::identity(),
        });
    }
    let n_tracked = drift_norms.len();
    let ate = rms(drift_norms);
    let tr = tracking_rate(n_tracked, scene.len())?;
    Ok(SimOutcome {
        estimated: Trajectory::new(poses)?,
        tracked,
        eval: EvalResult::new(ate, tr, usm_params)?,
    })
}

/// Unit direction shared by every nonzero motion bias, if one exists.
fn common_direction(scene: &SceneScript) -> Result<Option<Vector3<f64>>, SimError> {
    let mut dir: Option<Vector3<f64>> = None;
    for (t, frame) in scene.frames.iter().enumerate() {
        for b in &frame.motion_bias {
            let b = Vector3::from(*b);
            let norm = b.norm();
            if norm == 0.0 {
                continue;
            }
            match dir {
                None => dir = Some(b / norm),
                Some(d) => {
                    let along = b.dot(&d);
                    if along < 0.0 || (b - along * d).norm() > 1e-9 * norm {
                        return Err(SimError::OracleUnavailable(format!(
                            "frame {t}: motion biases are not co-directional"
                        )));
                    }
                }
            }
        }
    }
    Ok(dir)
}

/// Greedy mask that is optimal for noise-free scenes with co-directional
/// motion: in each frame, mask every moving class if the remaining features
/// still reach `m_min`, otherwise mask nothing.
///
/// Refuses scenes with non co-directional biases, or frames where masking all
/// moving classes loses tracking but masking some of them would not.
pub fn optimal_mask(scene: &SceneScript) -> Result<TemporalMask, SimError> {
    scene.validate()?;
    common_direction(scene)?;
    let mut mask = TemporalMask::zeros(scene.class_names.clone(), scene.len())?;
    let m_min = u64::from(scene.m_min);
    for (t, frame) in scene.frames.iter().enumerate() {
        let moving: Vec<usize> = (0..scene.classes())
            .filter(|&c| frame.dynamic_counts[c] > 0 && Vector3::from(frame.motion_bias[c]).norm() > 0.0)
            .collect();
        if moving.is_empty() {
            continue;
        }
        let everything: u64 = u64::from(frame.static_count)
            + frame.dynamic_counts.iter().map(|&n| u64::from(n)).sum::<u64>();
        let moving_total: u64 = moving.iter().map(|&c| u64::from(frame.dynamic_counts[c])).sum();
        if everything - moving_total >= m_min {
            for &c in &moving {
                mask.set(t, c, true);
            }
        } else {
            let smallest = moving
                .iter()
                .map(|&c| u64::from(frame.dynamic_counts[c]))
                .min()
                .unwrap_or(0);
            if everything >= m_min && everything - smallest >= m_min {
                return Err(SimError::OracleUnavailable(format!(
                    "frame {t}: masking feasibility depends on which moving classes are masked"
                )));
            }
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneProfile {
    /// Moving objects dominate the view while static features still suffice.
    ConsensusInversion,
    /// Objects move while static features alone are below `m_min`.
    ExcessiveMasking,
    /// Still / inversion / still / excessive / still.
    Mixed,
    /// Objects present but never moving.
    Static,
}

impl SceneProfile {
    /// Smallest supported sequence length: every phase gets at least one frame.
    pub fn min_len(self) -> usize {
        match self {
            SceneProfile::Static => 1,
            SceneProfile::ConsensusInversion | SceneProfile::ExcessiveMasking => 3,
            SceneProfile::Mixed => 10,
        }
    }

    fn phases(self, l: usize) -> Vec<Phase> {
        use PhaseKind::*;
        let (kinds, bounds): (Vec<PhaseKind>, Vec<usize>) = match self {
            SceneProfile::Static => (vec![Still], vec![]),
            SceneProfile::ConsensusInversion => (vec![Still, ConsensusInversion, Still], vec![l / 3, 2 * l / 3]),
            SceneProfile::ExcessiveMasking => (vec![Still, ExcessiveMasking, Still], vec![l / 3, 2 * l / 3]),
            SceneProfile::Mixed => (
                vec![Still, ConsensusInversion, Still, ExcessiveMasking, Still],
                vec![l / 5, 9 * l / 20, 11 * l / 20, 4 * l / 5],
            ),
        };
        let mut starts = vec![0];
        starts.extend(bounds);
        let mut ends = starts[1..].to_vec();
        ends.push(l);
        kinds
            .into_iter()
            .zip(starts.into_iter().zip(ends))
            .map(|(kind, (start, end))| Phase { kind, start, end })
            .collect()
    }
}

/// Builds a scene of `l` frames and `p` classes.
///
/// Phase boundaries sit at fixed fractions of `l`: thirds for the two
/// single-event profiles, and `0.2, 0.45, 0.55, 0.8` for `Mixed`. Class 0 is
/// the moving object; further classes are static bystanders that carry half
/// of the background features. All motion is along +x and `m_min` is
/// [`GENERATED_M_MIN`]. Per phase, the seed draws:
///
/// * still: background 80–120 features, object 20–40;
/// * consensus inversion: background 40–60, object 2–3× the background,
///   total drift 4–8 cm over the phase;
/// * excessive masking: background 10–20 (below `m_min`), object 30–50,
///   total drift 2–4 mm over the phase.
///
/// Drift magnitudes are sized for λ = 10 m⁻¹. Noise is zero; set
/// `noise_sigma` afterwards to exercise repetitions.
pub fn generate_scene(profile: SceneProfile, l: usize, p: usize, seed: u64) -> Result<SceneScript, SimError> {
    if l < profile.min_len() {
        return Err(SimError::TooShort {
            profile,
            len: l,
            min: profile.min_len(),
        });
    }
    if p == 0 {
        return Err(SimError::InvalidScene("at least one class is required".into()));
    }
    let mut rng = rng_from_seed(seed);
    let phases = profile.phases(l);
    let mut frames = Vec::with_capacity(l);
    for phase in &phases {
        let len = phase.end - phase.start;
        let (background, object, total_drift) = match phase.kind {
            PhaseKind::Still => (rng.gen_range(80..=120u32), rng.gen_range(20..=40u32), 0.0),
            PhaseKind::ConsensusInversion => {
                let bg = rng.gen_range(40..=60u32);
                let ratio = rng.gen_range(2.0..=3.0);
                (bg, (f64::from(bg) * ratio).round() as u32, rng.gen_range(0.04..=0.08))
            }
            PhaseKind::ExcessiveMasking => (
                rng.gen_range(10..=20u32),
                rng.gen_range(30..=50u32),
                rng.gen_range(0.002..=0.004),
            ),
        };
        // per-frame step when the object is trusted: total_drift / len
        let bias_x = if total_drift > 0.0 {
            total_drift / len as f64 * f64::from(background + object) / f64::from(object)
        } else {
            0.0
        };
        let bystander = if p > 1 { background / 2 / (p as u32 - 1) } else { 0 };
        let static_count = background - bystander * (p as u32 - 1);
        for _ in 0..len {
            let mut dynamic_counts = vec![bystander; p];
            let mut motion_bias = vec![[0.0; 3]; p];
            dynamic_counts[0] = object;
            motion_bias[0] = [bias_x, 0.0, 0.0];
            frames.push(SceneFrame {
                static_count,
                dynamic_counts,
                motion_bias,
            });
        }
    }
    let class_names = if p == 1 {
        vec!["dynamic".to_string()]
    } else {
        (0..p).map(|c| format!("class{c}")).collect()
    };
    let ground_truth = (0..l)
        .map(|t| {
            let s = t as f64 / l as f64;
            [0.01 * t as f64, 0.5 * (std::f64::consts::TAU * s).sin(), 0.0]
        })
        .collect();
    let profile_name = serde_json::to_value(profile).expect("profile serializes");
    Ok(SceneScript {
        sequence_id: format!("{}-{l}x{p}-{seed}", profile_name.as_str().unwrap_or("scene")),
        class_names,
        m_min: GENERATED_M_MIN,
        noise_sigma: 0.0,
        frames,
        ground_truth,
        phases,
    })
}

/// File-based simulation conforming to the subprocess evaluator protocol:
/// reads a scene (JSON) and a mask (CSV), writes a result file.
pub fn simulate_files(
    scene_path: &Path,
    mask_path: &Path,
    out_path: &Path,
    seed: u64,
    usm_params: &UsmParams,
) -> Result<ResultFile, SimError> {
    let scene = SceneScript::load(scene_path)?;
    let mask = read_mask(mask_path)?;
    let outcome = simulate(&scene, &mask, seed, usm_params)?;
    let result = ResultFile {
        ate_rmse: outcome.eval.ate_rmse,
        tracking_rate: outcome.eval.tracking_rate,
        tracked_frames: Some(outcome.tracked_frames() as u64),
        total_frames: Some(scene.len() as u64),
        usm: Some(outcome.eval.usm),
    };
    result.write(out_path)?;
    Ok(result)
}
