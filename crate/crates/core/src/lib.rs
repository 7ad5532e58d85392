//! Illumination estimation for auto white balance.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`optim`], [`gradcheck`], [`checkpoint`]:
//!   a small dense-tensor core with tape-based reverse-mode differentiation,
//!   Adam, a finite-difference checker and a binary checkpoint format.
//! * [`metrics`]: log-chroma transforms, angular errors, color correction,
//!   Gray World and the error summary statistics.
//! * [`hist`], [`backbone`], [`exif`]: the three feature branches
//!   (differentiable uv histogram with pyramid pooling, SqueezeNet-style
//!   convolutional trunk, and the Exif MLP).
//! * [`models`]: Models A, B, C and the two-illuminant variants.
//! * [`data`], [`synth`]: dataset IO, track classification, trainset
//!   expansion, augmentation, batching and synthetic scenes.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod exif;
pub mod gradcheck;
pub mod gradsuite;
pub mod hist;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{AwbError, Result};
pub use tensor::{Real, Tensor};
