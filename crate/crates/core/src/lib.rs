//! Depth-regularized radiance fields from asynchronous RGB-D sequences.
//!
//! A timestamp-to-pose network localizes depth frames captured between RGB
//! frames; a partitioned radiance field is bootstrapped on RGB and then
//! refined jointly with the pose network under ramped depth supervision.

pub mod diffcore;
pub mod field;
pub mod geom;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod synth;
pub mod timepose;
