//! Partitioned radiance field: nearest-centroid routing to per-tile MLPs,
//! coarse-to-fine ray sampling and quadrature volume rendering.

mod grid;
mod render;

pub use grid::{route_submodel, FieldConfig, QueryOutput, QueryTrace, RadianceFieldGrid};
pub use render::{
    composite, composite_backward, render_image, render_rays, render_rays_at, render_rays_backward, render_source, sample_coarse,
    sample_fine, Composite, RadianceSource, RayGrad, RenderConfig, RenderOutput, RenderTrace,
};

use crate::diffcore::DiffError;

#[derive(thiserror::Error, Debug)]
pub enum FieldError {
    #[error("invalid field config: {0}")]
    InvalidConfig(String),
    #[error("direction {index} is not unit length (norm {norm})")]
    NonUnitDirection { index: usize, norm: f64 },
    #[error("image id {id} out of range ({count} embeddings)")]
    ImageId { id: usize, count: usize },
    #[error("input length mismatch: {0}")]
    Length(&'static str),
    #[error(transparent)]
    Diff(#[from] DiffError),
}
