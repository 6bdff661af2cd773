//! End-to-end inference: prepared samples in, decoded poses out.

use crate::decode::{decode_pose, evaluate, DecodeConfig, EvalReport};
use crate::error::Result;
use crate::heatmap::{HeatmapVolume, Pose, Skeleton};
use crate::hourglass::HourglassModel;
use crate::sample::{prepare, prepare_input, stack_voxels, PreprocessConfig, Prepared, SampleSource};
use crate::tensor::Real;

/// Last-stack joint heatmaps for every sample, in eval mode.
pub fn predict_volumes<T: Real>(model: &HourglassModel<T>, samples: &[Prepared], batch: usize) -> Result<Vec<HeatmapVolume>> {
    let mut vols = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let x = stack_voxels::<T>(&chunk.iter().map(|p| &p.voxels).collect::<Vec<_>>())?;
        let out = model.predict(&x)?;
        let last = out.joints.last().expect("at least one stack");
        let (j, r) = (last.shape()[1], last.shape()[2]);
        let per = j * r * r * r;
        for n in 0..chunk.len() {
            vols.push(HeatmapVolume {
                channels: j,
                resolution: r,
                values: last.values()[n * per..(n + 1) * per].iter().map(|v| v.wide()).collect(),
            });
        }
    }
    Ok(vols)
}

/// Decodes each volume on its sample's output grid.
/// Returns the poses and the number of joints that used the all-zero fallback.
pub fn decode_all(vols: &[HeatmapVolume], samples: &[Prepared], decode: &DecodeConfig) -> Result<(Vec<Pose>, usize)> {
    let mut poses = Vec::with_capacity(vols.len());
    let mut fallbacks = 0;
    for (vol, p) in vols.iter().zip(samples) {
        let (pose, f) = decode_pose(vol, &p.output_grid, decode)?;
        poses.push(pose);
        fallbacks += f;
    }
    Ok((poses, fallbacks))
}

/// Eval-mode predictions from the last stack, decoded in millimetres.
pub fn predict_poses<T: Real>(
    model: &HourglassModel<T>,
    samples: &[Prepared],
    decode: &DecodeConfig,
    batch: usize,
) -> Result<(Vec<Pose>, usize)> {
    decode_all(&predict_volumes(model, samples, batch)?, samples, decode)
}

/// Prepares every sample without augmentation.
pub fn prepare_all(source: &dyn SampleSource, skeleton: &Skeleton, cfg: &PreprocessConfig) -> Result<Vec<Prepared>> {
    (0..source.len())
        .map(|i| prepare(&source.get(i)?, skeleton, cfg, false))
        .collect()
}

/// Crops and voxelizes every sample for inference, without targets.
pub fn prepare_inputs(source: &dyn SampleSource, cfg: &PreprocessConfig) -> Result<Vec<Prepared>> {
    (0..source.len())
        .map(|i| prepare_input(&source.get(i)?.cloud, cfg))
        .collect()
}

/// Predicts, decodes and scores a whole sample source.
pub fn evaluate_model<T: Real>(
    model: &HourglassModel<T>,
    source: &dyn SampleSource,
    cfg: &PreprocessConfig,
    decode: &DecodeConfig,
    thresholds: &[f64],
) -> Result<(EvalReport, Vec<Pose>)> {
    let prepared = prepare_inputs(source, cfg)?;
    let (pred, fallbacks) = predict_poses(model, &prepared, decode, 8)?;
    let truth: Vec<Pose> = (0..source.len()).map(|i| source.get(i).map(|s| s.pose)).collect::<Result<_>>()?;
    let mut report = evaluate(&pred, &truth, thresholds)?;
    report.fallback_joints = fallbacks;
    Ok((report, pred))
}
