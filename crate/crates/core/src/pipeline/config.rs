use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::field::{FieldConfig, RenderConfig};
use crate::timepose::TimePoseConfig;

/// How RGB and depth rays share optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    /// Every step mixes both modalities in proportion to their frame counts.
    Proportional,
    /// Steps alternate between RGB-only and depth-only batches.
    Alternate,
}

/// Hyper-parameters of one field-training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub iters: usize,
    pub lr_theta: f64,
    /// Pose learning rate; `None` uses `lr_theta / 10`.
    pub lr_phi: Option<f64>,
    /// Appearance-embedding learning rate; `None` uses `lr_theta`.
    pub lr_embed: Option<f64>,
    /// Learning rates decay exponentially to this fraction.
    pub lr_final_factor: f64,
    pub batch_rays: usize,
    pub lambda_color: f64,
    /// Final weight of the depth MSE (per square meter).
    pub lambda_depth_max: f64,
    /// Fraction of the stage over which the depth weight ramps up from zero.
    pub ramp_fraction: f64,
    /// Fraction of the stage before pose updates start; the pose step then
    /// ramps up over `ramp_fraction` like the depth weight.
    pub pose_warmup_fraction: f64,
    pub mixing: Mixing,
    pub log_every: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            iters: 2000,
            lr_theta: 5e-3,
            lr_phi: None,
            lr_embed: None,
            lr_final_factor: 0.1,
            batch_rays: 256,
            lambda_color: 1.0,
            lambda_depth_max: 0.0,
            ramp_fraction: 0.5,
            pose_warmup_fraction: 0.0,
            mixing: Mixing::Proportional,
            log_every: 25,
        }
    }
}

impl StageConfig {
    pub fn validate(&self, what: &str) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(format!("{what}: {m}")));
        if self.iters == 0 || self.batch_rays == 0 || self.log_every == 0 {
            return bad("iters, batch_rays and log_every must be positive");
        }
        if !(self.lr_theta > 0.0) || self.lr_phi.is_some_and(|v| !(v >= 0.0)) || self.lr_embed.is_some_and(|v| !(v >= 0.0)) {
            return bad("learning rates must be positive");
        }
        if !(self.lr_final_factor > 0.0 && self.lr_final_factor <= 1.0) {
            return bad("lr_final_factor must lie in (0, 1]");
        }
        if !(self.ramp_fraction > 0.0 && self.ramp_fraction <= 1.0) {
            return bad("ramp_fraction must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.pose_warmup_fraction) {
            return bad("pose_warmup_fraction must lie in [0, 1)");
        }
        if !(self.lambda_color >= 0.0 && self.lambda_depth_max >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }

    pub fn lr_phi(&self) -> f64 {
        self.lr_phi.unwrap_or(self.lr_theta / 10.0)
    }

    pub fn lr_embed(&self) -> f64 {
        self.lr_embed.unwrap_or(self.lr_theta)
    }

    /// Learning-rate multiplier at `step`.
    pub fn lr_decay(&self, step: usize) -> f64 {
        self.lr_final_factor.powf(step as f64 / self.iters as f64)
    }
}

/// Depth weight at `step`: a linear ramp from 0 to `lambda_depth_max` over
/// the first `ramp_fraction` of the stage, constant afterwards.
pub fn depth_weight_schedule(step: usize, cfg: &StageConfig) -> f64 {
    let ramp = cfg.ramp_fraction * cfg.iters as f64;
    cfg.lambda_depth_max * (step as f64 / ramp).min(1.0)
}

/// Pose learning-rate multiplier at `step` of stage 3.
pub fn pose_step_schedule(step: usize, cfg: &StageConfig) -> f64 {
    let start = cfg.pose_warmup_fraction * cfg.iters as f64;
    let ramp = cfg.ramp_fraction * cfg.iters as f64;
    ((step as f64 - start) / ramp).clamp(0.0, 1.0)
}

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Rays per render call.
    pub chunk: usize,
    /// Evaluate only the first views; `None` uses all.
    pub max_views: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            chunk: 1024,
            max_views: None,
        }
    }
}

/// Complete configuration of a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub timepose: TimePoseConfig,
    pub field: FieldConfig,
    pub render: RenderConfig,
    pub bootstrap: StageConfig,
    pub joint: StageConfig,
    pub eval: EvalConfig,
    /// The field bounds extend the scene bounds by this margin (meters).
    pub bounds_margin: f64,
    /// Depth-pose errors are recorded every this many stage-3 steps.
    pub pose_log_every: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            timepose: TimePoseConfig::default(),
            field: FieldConfig::default(),
            render: RenderConfig::default(),
            bootstrap: StageConfig::default(),
            joint: StageConfig {
                lr_theta: 2e-3,
                lr_phi: Some(5e-6),
                lambda_depth_max: 1e-2,
                pose_warmup_fraction: 0.3,
                ..StageConfig::default()
            },
            eval: EvalConfig::default(),
            bounds_margin: 2.0,
            pose_log_every: 100,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.timepose.validate()?;
        self.field.validate()?;
        self.render.validate()?;
        self.bootstrap.validate("bootstrap")?;
        self.joint.validate("joint")?;
        if self.eval.chunk == 0 || self.pose_log_every == 0 {
            return Err(PipelineError::InvalidConfig("eval.chunk and pose_log_every must be positive".into()));
        }
        if !(self.bounds_margin >= 0.0) {
            return Err(PipelineError::InvalidConfig("bounds_margin must be non-negative".into()));
        }
        Ok(())
    }
}

/// Pipeline mutations compared in the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Time-pose initialization, joint refinement with ramped depth.
    Full,
    /// Stage 3 without the depth term.
    NoDepth,
    /// Stage 3 with the time-pose network frozen.
    NoJoint,
    /// Per-frame depth poses initialized from the nearest RGB pose, refined jointly.
    RgbInit,
    /// Per-frame depth poses initialized by interpolating RGB poses, refined jointly.
    LinearInterpInit,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::NoDepth, Variant::NoJoint, Variant::RgbInit, Variant::LinearInterpInit];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDepth => "no_depth",
            Variant::NoJoint => "no_joint",
            Variant::RgbInit => "rgb_init",
            Variant::LinearInterpInit => "linear_interp_init",
        }
    }

    pub fn uses_depth(self) -> bool {
        self != Variant::NoDepth
    }

    pub fn refines_poses(self) -> bool {
        !matches!(self, Variant::NoDepth | Variant::NoJoint)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| PipelineError::UnknownVariant(s.to_string()))
    }
}
