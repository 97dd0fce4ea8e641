//! Input-adaptive frame selection and temporal-convolution gating for small
//! 3D video classifiers.
//!
//! A lightweight selection network looks at a whole clip and emits, per clip,
//! keep-probabilities for every frame and for every temporal-convolution
//! stage of the classifier. Actions are sampled from those Bernoulli policies
//! during training (REINFORCE with a moving-average baseline) and decoded
//! greedily at test time. Disabled stages fall back to the 2D convolution
//! given by the center temporal slice of their kernel.

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod eval;
pub mod gating;
pub mod optim;
pub mod rng;
pub mod selection;
pub mod tensor;
pub mod trainer;
pub mod video_net;

use thiserror::Error;

pub use tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
