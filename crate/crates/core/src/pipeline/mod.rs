//! Three-stage optimization: time-pose fitting on RGB poses, RGB-only
//! bootstrap of the field, then joint refinement of field and depth poses
//! with ramped depth supervision.

mod config;
mod poses;
mod run;
mod train;

pub use config::{depth_weight_schedule, pose_step_schedule, EvalConfig, Mixing, PipelineConfig, StageConfig, Variant};
pub use poses::{
    depth_pose_errors, depth_ray, depth_ray_vjp, interpolated_rgb_poses, nearest_rgb_poses, DepthPoseSource, PoseBatch,
    PoseTable,
};
pub use run::{
    evaluate, field_bounds, initial_pose_source, load_field_checkpoint, load_stage1, load_stage2, load_stage3, new_field, read_run_config,
    run_ablation, run_pipeline, save_stage1, save_stage2, save_stage3, stage1, stage2, stage3, write_report,
    write_run_config, Evaluation, RunConfig, RunReport, Stage1, Stage3, ViewMetrics, WallClock, CONFIG_FILE,
    STAGE1_CKPT, STAGE2_CKPT, STAGE3_CKPT,
};
pub use train::{
    accumulate_step, bootstrap_train, joint_optimize, sample_rays, JointMode, JointReport, LossPoint, PosePoint,
    RayBatch, StepLoss,
};

use crate::diffcore::DiffError;
use crate::field::FieldError;
use crate::geom::GeomError;
use crate::metrics::MetricsError;
use crate::synth::SynthError;
use crate::timepose::TimePoseError;

#[derive(thiserror::Error, Debug)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("unknown variant `{0}` (expected full, no_depth, no_joint, rgb_init or linear_interp_init)")]
    UnknownVariant(String),
    #[error("dataset has no RGB frames")]
    EmptyDataset,
    #[error("{stage} not found at {path}; run the earlier stages first")]
    MissingStage { stage: &'static str, path: String },
    #[error("{0}")]
    Stage(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    TimePose(#[from] TimePoseError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
