//! A small convolutional network with exact reverse-mode gradients.
//!
//! The architecture is fixed: a stride-2 stem convolution, `B` blocks of
//! `conv 3x3 -> ReLU -> maxpool 2x2` (doubling channels), global average
//! pooling, inverted dropout at rate 0.2 and a single-logit dense head.
//! Activations are NHWC, convolution kernels HWIO.
//!
//! Everything is generic over [`Scalar`] so the same weights can be run in
//! `f64` when checking gradients against finite differences.

mod checkpoint;
mod layers;
mod loss;
mod model;
mod tensor;
mod train;


use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint_spec, save_checkpoint, CHECKPOINT_VERSION};
pub use layers::{conv2d_backward, conv2d_forward, maxpool2_backward, maxpool2_forward};
pub use loss::{bce_with_logits, sigmoid, BceOutput};
pub use model::{
    tile_input,
    adam_step, predict, predict_logits, AdamConfig, Cache, FeatureGrad, Forward, Gradients, ModelSpec, ModelState, ADAM,
    DROPOUT_RATE,
};
pub use tensor::{Tensor, TensorF32};
pub use train::{
    evaluate, train, train_until, EarlyStopping, EpochRecord, Phase, PhaseOne, PhaseTwo, TileSet, TrainOutcome,
    TrainProgress, TrainSchedule,
};

/// Floating-point element type of a model.
pub trait Scalar: Float + Send + Sync + Sum + Debug + Default + 'static {
    fn of(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("finite constant")
    }
    fn f64(self) -> f64 {
        self.to_f64().expect("float to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("cache was produced before the last parameter update")]
    StaleCache,
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("non-finite {what} at epoch {epoch}")]
    NonFinite { what: &'static str, epoch: u32 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("checkpoint {path}: model spec digest {found} does not match {expected}")]
    VersionMismatch { path: String, expected: String, found: String },
    #[error("checkpoint {path}: {message}")]
    CorruptCheckpoint { path: String, message: String },
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
