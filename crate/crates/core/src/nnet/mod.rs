//! A small convolutional count classifier trained with plain SGD.
//!
//! [`model`] holds the network, [`train`] the optimization loop,
//! [`checkpoint`] the binary weight format and [`gradcheck`] a finite
//! difference check of the hand-written backward pass.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

use std::path::PathBuf;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{ModelState, SubitNetSpec};
pub use tensor::Tensor;
pub use train::{TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("no loadable training images in {0}")]
    NoLoadableImages(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Imaging(#[from] crate::imaging::ImagingError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

pub type Result<T> = std::result::Result<T, NnetError>;
