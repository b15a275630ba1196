//! Timestamp-to-pose network and its training.

mod baseline;
mod fit;
pub mod hashgrid;
mod loss;
mod model;

use std::path::Path;

use nalgebra::Vector3;

pub use baseline::linear_interp_pose;
pub use fit::{fit_timepose, fit_timepose_with_holdout, pose_errors, FitReport, PoseErrorStats};
pub use hashgrid::{hash_interp, quadratic_weights, HashLevel, NodeIndexing};
pub use loss::{objective, pose_loss, pose_loss_terms, speed_loss, speed_loss_terms, Objective, PoseLossTerms, SpeedLossTerms};
pub use model::{Normalization, TimePoseBatch, TimePoseConfig, TimePoseModel, TimePoseTrace};

use crate::diffcore::DiffError;
use crate::geom::{read_pose_csv, write_pose_csv, GeomError, Pose};

#[derive(thiserror::Error, Debug)]
pub enum TimePoseError {
    #[error("invalid time-pose config: {0}")]
    InvalidConfig(&'static str),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("timestamps must be strictly increasing (sample {index}: {prev} then {next})")]
    NonMonotone { index: usize, prev: f64, next: f64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("sample {0} has no velocity")]
    MissingVelocity(usize),
    #[error("non-finite sample {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// A timestamped pose with optional ground-truth velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedPoseSample {
    pub t: f64,
    pub pose: Pose,
    pub velocity: Option<Vector3<f64>>,
}

impl TimedPoseSample {
    pub fn new(t: f64, pose: Pose) -> Self {
        Self { t, pose, velocity: None }
    }

    /// Attaches velocities from neighbor differences: central in the
    /// interior, one-sided at both ends.
    pub fn with_central_velocities(samples: &[TimedPoseSample]) -> Vec<TimedPoseSample> {
        let n = samples.len();
        let x = |i: usize| *samples[i].pose.translation();
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let (a, b) = match n {
                    0 | 1 => (i, i),
                    _ if i == 0 => (0, 1),
                    _ if i == n - 1 => (n - 2, n - 1),
                    _ => (i - 1, i + 1),
                };
                let v = if a == b {
                    Vector3::zeros()
                } else {
                    (x(b) - x(a)) / (samples[b].t - samples[a].t)
                };
                TimedPoseSample { velocity: Some(v), ..s.clone() }
            })
            .collect()
    }
}

/// Checks count, finiteness and strictly increasing timestamps.
pub fn validate_samples(samples: &[TimedPoseSample], min_count: usize) -> Result<(), TimePoseError> {
    if samples.len() < min_count {
        return Err(TimePoseError::TooFewSamples { need: min_count, got: samples.len() });
    }
    for (i, s) in samples.iter().enumerate() {
        let x = s.pose.translation();
        if !s.t.is_finite() || !x.iter().all(|v| v.is_finite()) {
            return Err(TimePoseError::NonFinite(i));
        }
        if i > 0 && !(s.t > samples[i - 1].t) {
            return Err(TimePoseError::NonMonotone { index: i, prev: samples[i - 1].t, next: s.t });
        }
    }
    Ok(())
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<TimedPoseSample>, TimePoseError> {
    Ok(read_pose_csv(path)?.into_iter().map(|(t, p)| TimedPoseSample::new(t, p)).collect())
}

pub fn write_samples_csv(path: &Path, samples: &[TimedPoseSample]) -> Result<(), TimePoseError> {
    let rows: Vec<(f64, Pose)> = samples.iter().map(|s| (s.t, s.pose)).collect();
    Ok(write_pose_csv(path, &rows)?)
}
