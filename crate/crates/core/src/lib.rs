//! Semi-supervised volumetric segmentation with complementary consistency.
//!
//! A main V-Net is trained alongside two auxiliary V-Nets whose decoders
//! drop skip-connections at complementary layers. Sharpened predictions of
//! each model serve as soft targets for the others on unlabeled data.

pub mod checkpoint;
pub mod cli;
pub mod datapipe;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod netcore;
pub mod nn;
pub mod real;
pub mod tensor;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use netcore::{ArchConfig, CcNet, EncoderFeatures, Model, ModelSpec, ModelView, ProbabilityMap, Role, SkipConfig};
pub use real::Real;
pub use tensor::Tensor;
pub use volume::{Grid, Mask, Volume};
