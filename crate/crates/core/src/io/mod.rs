//! File formats: tensor files, PLY point clouds, PNG masks, scene manifests
//! and voxel-grid bundles.

pub mod grid;
pub mod manifest;
pub mod otf;
pub mod ply;
pub mod png;
