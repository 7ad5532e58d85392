//! Dataset IO, track classification, trainset expansion, augmentation and
//! batching.

pub mod augment;
pub mod batch;
pub mod dataset;
pub mod expansion;
pub mod pnm;

pub use augment::{augment, AugmentConfig};
pub use batch::{batch_iter, epoch_order};
pub use dataset::{classify_track, LabeledSample, Manifest, Track};
pub use expansion::{expansion_filter, GtUvHistogram};
pub use pnm::{load_image, save_image};
