//! Partial-deepfake speech detection on precomputed frame embeddings.
//!
//! The pipeline pools a variable-length `T × D` embedding sequence to a fixed
//! length, refines it with a small front-end, gates it with a temporal
//! difference attention module and classifies every frame. Frame spoof
//! probabilities are averaged into one utterance score. Only utterance-level
//! labels are used for training.

pub mod autodiff;
mod error;
pub mod analysis;
pub mod embedding_io;
pub mod metrics;
pub mod model;
pub mod pooling;
pub mod synth;
pub mod training;
mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
