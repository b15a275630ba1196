//! Small differentiable-computation core.
//!
//! Everything here is batched over rows: an `N x D` matrix holds `N`
//! independent inputs. Modules return a trace from their forward pass and
//! consume it in `backward`, accumulating parameter gradients into a
//! [`ParamStore`]. A single scalar tangent can be carried alongside values
//! (forward mode), and the tangent path is itself reverse-differentiable.

mod adam;
mod checkpoint;
mod dual;
mod encoding;
pub mod gradcheck;
mod mlp;
mod params;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CheckpointEntry, CHECKPOINT_MAGIC};
pub use dual::{forward_derivative, Dual};
pub use encoding::{encode_backward, encode_batch, encoded_dim, positional_encoding};
pub use mlp::{Mlp, MlpGrads, MlpSpec, MlpTrace};
pub use params::{Param, ParamId, ParamStore};

#[derive(thiserror::Error, Debug)]
pub enum DiffError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid mlp spec: {0}")]
    InvalidSpec(&'static str),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("trace does not belong to this module ({0})")]
    ForeignTrace(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Hidden activation.
#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}
