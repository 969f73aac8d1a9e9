//! Structure-from-motion with track-community scene segmentation,
//! duplicate-structure disambiguation and SIM(3) model merging.

pub mod community;
pub mod config;
pub mod correspondence;
pub mod disambiguation;
pub mod error;
pub mod geometry;
pub mod io;
pub mod merge;
pub mod pipeline;
pub mod sfm;
pub mod synth;

pub use config::PipelineConfig;
pub use correspondence::{Match, Track, TrackId, View, ViewId};
pub use error::{Error, Result};
pub use geometry::{CameraPose, CrossPair, Intrinsics, SimilarityTransform};
pub use sfm::Reconstruction;
