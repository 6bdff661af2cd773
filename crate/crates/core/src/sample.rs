//! Turns a labelled point cloud into network input and regression targets.

use crate::error::{Error, Result};
use crate::heatmap::{bone_targets, joint_targets, HeatmapVolume, Pose, Skeleton};
use crate::tensor::{Real, Tensor};
use crate::voxel::{compute_cube_with, voxelize, CenterMode, CubeCrop, Grid, PointCloud, VoxelGrid, DEFAULT_MIN_SIDE_MM};

/// A labelled point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    pub cloud: PointCloud,
    pub pose: Pose,
}

/// Random-access sample collection.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<RawSample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [RawSample] {
    fn len(&self) -> usize {
        <[RawSample]>::len(self)
    }
    fn get(&self, index: usize) -> Result<RawSample> {
        self.as_ref()
            .get(index)
            .cloned()
            .ok_or_else(|| Error::dim(format!("sample {index} out of range")))
    }
}

impl SampleSource for Vec<RawSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn get(&self, index: usize) -> Result<RawSample> {
        SampleSource::get(self.as_slice(), index)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub input_res: usize,
    pub output_res: usize,
    pub min_side_mm: f64,
    pub center: CenterMode,
    /// Multiplies the cloud extent before the minimum side is applied.
    pub margin: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            input_res: 64,
            output_res: 32,
            min_side_mm: DEFAULT_MIN_SIDE_MM,
            center: CenterMode::BoundingBox,
            margin: 1.0,
        }
    }
}

/// Network input plus targets on the output grid of the same cube.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub cube: CubeCrop,
    pub voxels: VoxelGrid,
    pub output_grid: Grid,
    pub joints: HeatmapVolume,
    /// Empty (zero channels) when bone targets were not requested.
    pub bones: HeatmapVolume,
}

impl Prepared {
    pub fn input_tensor<T: Real>(&self) -> Tensor<T> {
        self.voxels.to_tensor()
    }
}

pub fn crop(cloud: &PointCloud, cfg: &PreprocessConfig) -> Result<CubeCrop> {
    compute_cube_with(cloud, cfg.min_side_mm, cfg.center, cfg.margin)
}

/// Crop, voxelize at the input resolution and rasterize targets at the output resolution.
pub fn prepare(sample: &RawSample, skeleton: &Skeleton, cfg: &PreprocessConfig, with_bones: bool) -> Result<Prepared> {
    if sample.pose.len() != skeleton.joints() {
        return Err(Error::dim(format!(
            "pose has {} joints, skeleton has {}",
            sample.pose.len(),
            skeleton.joints()
        )));
    }
    let cube = crop(&sample.cloud, cfg)?;
    let voxels = voxelize(&sample.cloud, &cube, cfg.input_res)?;
    let output_grid = cube.grid(cfg.output_res);
    let joints = joint_targets(&sample.pose, &output_grid)?;
    let bones = if with_bones {
        bone_targets(&sample.pose, skeleton, &output_grid)?
    } else {
        HeatmapVolume::zeros(0, cfg.output_res)
    };
    Ok(Prepared {
        cube,
        voxels,
        output_grid,
        joints,
        bones,
    })
}

/// Crop and voxelize only; the heatmap fields are left with zero channels.
/// Inference needs no ground truth, so joints outside the cube are no error here.
pub fn prepare_input(cloud: &PointCloud, cfg: &PreprocessConfig) -> Result<Prepared> {
    let cube = crop(cloud, cfg)?;
    Ok(Prepared {
        cube,
        voxels: voxelize(cloud, &cube, cfg.input_res)?,
        output_grid: cube.grid(cfg.output_res),
        joints: HeatmapVolume::zeros(0, cfg.output_res),
        bones: HeatmapVolume::zeros(0, cfg.output_res),
    })
}

/// Stacks `[C, R, R, R]` volumes into one `[N, C, R, R, R]` tensor.
pub fn stack_volumes<T: Real>(vols: &[&HeatmapVolume]) -> Result<Tensor<T>> {
    let first = vols.first().ok_or(Error::EmptyBatch)?;
    let (c, r) = (first.channels, first.resolution);
    let mut values = Vec::with_capacity(vols.len() * first.values.len());
    for v in vols {
        if v.channels != c || v.resolution != r {
            return Err(Error::dim("heatmap volumes in a batch differ in shape"));
        }
        values.extend(v.values.iter().map(|&x| T::of(x)));
    }
    Tensor::from_vec(&[vols.len(), c, r, r, r], values)
}

/// Stacks voxel grids into one `[N, 1, R, R, R]` tensor.
pub fn stack_voxels<T: Real>(grids: &[&VoxelGrid]) -> Result<Tensor<T>> {
    let first = grids.first().ok_or(Error::EmptyBatch)?;
    let r = first.grid.resolution;
    let mut values = Vec::with_capacity(grids.len() * first.occupancy.len());
    for g in grids {
        if g.grid.resolution != r {
            return Err(Error::dim("voxel grids in a batch differ in resolution"));
        }
        values.extend(g.occupancy.iter().map(|&o| if o != 0 { T::one() } else { T::zero() }));
    }
    Tensor::from_vec(&[grids.len(), 1, r, r, r], values)
}
