//! Open-vocabulary segmentation and 3D semantic mapping from frozen
//! foundation-model tokens.
//!
//! Vision tokens are reduced with PCA and clustered into visual prototypes.
//! Vision-language tokens are averaged inside each prototype mask, giving
//! features that can be compared with text embeddings. The result is either
//! a 2D mask at image resolution or, with depth and poses, a voxel map that
//! can be queried with prompts.

pub mod alignment;
pub mod clustering;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod geometry;
pub mod io;
mod linalg;
pub mod pipeline;
pub mod reduction;
pub mod refinement;
pub mod tensor;

pub use config::{PipelineConfig, Preset};
pub use error::{Error, Result};
