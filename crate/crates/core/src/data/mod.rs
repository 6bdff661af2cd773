//! Dataset ingestion and synthetic data.

pub mod manifest;
pub mod msra;
pub mod synth;

pub use manifest::{DatasetManifest, FrameRef, MsraSource, SubjectLayout};
pub use msra::{read_msra_frame, read_pose_file, write_msra_frame};
pub use synth::{BoneSpec, SynthHandSpec};
