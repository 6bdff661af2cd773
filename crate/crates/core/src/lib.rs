//! Volumetric hand-pose estimation with a structure-aware stacked 3D
//! hourglass network.
//!
//! The pipeline runs depth frame → point cloud → cubic crop → binary voxel
//! grid → network → per-joint 3D heatmaps → top-K weighted decoding. Bone
//! heatmaps along the skeleton tree provide intermediate supervision on all
//! but the last stack.

pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod heatmap;
pub mod hourglass;
pub mod pipeline;
pub mod sample;
pub mod tensor;
pub mod train;
pub mod voxel;

pub use error::{Error, Result};
