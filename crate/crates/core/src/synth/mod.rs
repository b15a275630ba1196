//! Procedural scenes, ground-truth RGB-D rendering, camera trajectories and
//! asynchronous resampling, plus the on-disk dataset format.

mod dataset;
mod resample;
mod scene;
mod trajectory;

use std::path::Path;

pub use dataset::{
    dataset_scene, generate_dataset, load_dataset, save_dataset, AsyncDataset, CameraSpec, DatasetSpec, DepthFrame,
    RgbFrame, TestView,
};
pub use resample::{resample_plan, ResampleMode, ResamplePlan, ResampleProtocol};
pub use scene::{build_scene, gt_render, Hit, Scene, SceneBox, SceneSpec};
pub use trajectory::{gen_trajectory, look_rotation, TrajectoryKind, TrajectorySpec};

use crate::geom::GeomError;
use crate::raster::RasterError;

#[derive(thiserror::Error, Debug)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("could only place {placed} of {requested} boxes inside the scene bounds")]
    PackingCapacity { requested: usize, placed: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("{path}: {msg}")]
    Manifest { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

impl SynthError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        SynthError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
