//! Pyramid-in-transformer feature learning for video-based pedestrian retrieval.
//!
//! The crate is `no_std` (it needs `alloc`). Everything that touches files,
//! the clock or the command line lives in the companion `pit` crate.
//!
//! Pipeline, bottom to top:
//!
//! * [`tensor`]: dense `f64` tensors and a reverse-mode tape.
//! * [`embed`]: strided-convolution patch embedding plus class, position and
//!   camera embeddings.
//! * [`transformer`]: pre-norm encoder layers and the shared trunk.
//! * [`division`] and [`pyramid`]: token-grid division strategies and the
//!   per-image feature pyramid.
//! * [`video`]: keyframe selection and video-level fusion.
//! * [`training`]: branch heads, classification and batch-hard triplet
//!   losses, SGD with cosine annealing.
//! * [`retrieval`]: CMC / mAP evaluation under the cross-camera protocol.
//! * [`data`]: in-memory video samples, synthetic data and PK sampling.
//! * [`model`]: the assembled network.
#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod data;
pub mod division;
pub mod embed;
mod error;
pub mod init;
pub mod model;
pub mod params;
pub mod pyramid;
pub mod retrieval;
pub mod tensor;
pub mod training;
pub mod transformer;
pub mod video;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
