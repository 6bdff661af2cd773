//! Heatmap decoding and pose-error metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::heatmap::{HeatmapVolume, Pose};
use crate::voxel::{Grid, Point3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeConfig {
    pub k: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { k: 9 }
    }
}

/// One decoded joint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decoded {
    pub point: Point3,
    /// Every selected voxel had zero (or negative) response; `point` is the
    /// unweighted centroid of the selected voxels.
    pub fallback: bool,
}

/// Weighted mean of the centres of the `k` highest voxels. Ties go to the
/// lowest flat index; negative responses are clamped to zero; NaN ranks lowest.
pub fn decode(channel: &[f64], grid: &Grid, cfg: &DecodeConfig) -> Result<Decoded> {
    let n = grid.voxel_count();
    if channel.len() != n {
        return Err(Error::dim(format!("heatmap channel has {} voxels, grid has {n}", channel.len())));
    }
    if cfg.k == 0 || cfg.k > n {
        return Err(Error::config(format!("K must lie in 1..={n}, got {}", cfg.k)));
    }
    if !channel.iter().any(|v| v.is_finite()) {
        return Err(Error::dim("heatmap channel has no finite value"));
    }
    let key = |i: usize| {
        let v = channel[i];
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };
    let order = |a: &usize, b: &usize| key(*b).total_cmp(&key(*a)).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..n).collect();
    if cfg.k < n {
        idx.select_nth_unstable_by(cfg.k - 1, order);
        idx.truncate(cfg.k);
    }
    idx.sort_unstable_by(order);

    let weights: Vec<f64> = idx.iter().map(|&i| key(i).max(0.0).min(f64::MAX)).collect();
    let total: f64 = weights.iter().sum();
    let mut p = [0.0; 3];
    let fallback = !(total > 0.0);
    for (&i, &w) in idx.iter().zip(&weights) {
        let c = grid.flat_center(i);
        let w = if fallback { 1.0 / idx.len() as f64 } else { w / total };
        for a in 0..3 {
            p[a] += w * c[a];
        }
    }
    Ok(Decoded { point: p, fallback })
}

/// Decodes every channel of a volume into a pose; also returns the fallback count.
pub fn decode_pose(vol: &HeatmapVolume, grid: &Grid, cfg: &DecodeConfig) -> Result<(Pose, usize)> {
    if vol.resolution != grid.resolution {
        return Err(Error::dim(format!(
            "heatmap resolution {} vs grid resolution {}",
            vol.resolution, grid.resolution
        )));
    }
    let mut joints = Vec::with_capacity(vol.channels);
    let mut fallbacks = 0;
    for c in 0..vol.channels {
        let d = decode(vol.channel(c), grid, cfg)?;
        fallbacks += d.fallback as usize;
        joints.push(d.point);
    }
    Ok((Pose::new(joints), fallbacks))
}

/// Worst-case error of argmax-only decoding: half the voxel diagonal.
pub fn discretization_bound(voxel_size: f64) -> f64 {
    (3.0 * (voxel_size / 2.0).powi(2)).sqrt()
}

/// Thresholds 0, 1, …, 80 mm.
pub fn default_thresholds() -> Vec<f64> {
    (0..=80).map(|t| t as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub frames: usize,
    pub mean_error_mm: f64,
    pub per_joint_error_mm: Vec<f64>,
    /// `(threshold, fraction of frames whose worst joint error is below it)`.
    pub success_curve: Vec<(f64, f64)>,
    pub max_frame_error_mm: f64,
    /// Joints decoded by the all-zero fallback.
    pub fallback_joints: usize,
}

fn dist(a: Point3, b: Point3) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

/// Mean/per-joint Euclidean error and the success-frame curve.
pub fn evaluate(predictions: &[Pose], ground_truth: &[Pose], thresholds: &[f64]) -> Result<EvalReport> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::dim(format!(
            "{} predictions for {} ground-truth frames",
            predictions.len(),
            ground_truth.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::dim("no frames to evaluate"));
    }
    let j = ground_truth[0].len();
    let mut per_joint = vec![0.0; j];
    let mut frame_max = Vec::with_capacity(predictions.len());
    for (f, (p, g)) in predictions.iter().zip(ground_truth).enumerate() {
        if p.len() != j || g.len() != j {
            return Err(Error::dim(format!(
                "frame {f}: {} predicted and {} true joints, expected {j}",
                p.len(),
                g.len()
            )));
        }
        let mut worst = 0.0f64;
        for (n, (&a, &b)) in p.joints.iter().zip(&g.joints).enumerate() {
            let e = dist(a, b);
            per_joint[n] += e;
            worst = worst.max(e);
        }
        frame_max.push(worst);
    }
    let frames = predictions.len() as f64;
    per_joint.iter_mut().for_each(|e| *e /= frames);
    let mean = per_joint.iter().sum::<f64>() / j.max(1) as f64;
    let mut sorted: Vec<f64> = thresholds.to_vec();
    sorted.sort_by(f64::total_cmp);
    let success_curve = sorted
        .iter()
        .map(|&t| (t, frame_max.iter().filter(|&&e| e < t).count() as f64 / frames))
        .collect();
    Ok(EvalReport {
        frames: predictions.len(),
        mean_error_mm: mean,
        per_joint_error_mm: per_joint,
        success_curve,
        max_frame_error_mm: frame_max.iter().copied().fold(0.0, f64::max),
        fallback_joints: 0,
    })
}

impl EvalReport {
    /// Human-readable table followed by `key value` records for tooling.
    pub fn to_text(&self, joint_names: &[String]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frames          {}", self.frames);
        let _ = writeln!(s, "mean error (mm) {:.4}", self.mean_error_mm);
        let _ = writeln!(s, "max frame (mm)  {:.4}", self.max_frame_error_mm);
        let _ = writeln!(s, "fallback joints {}", self.fallback_joints);
        let _ = writeln!(s, "\njoint                error_mm");
        for (n, e) in self.per_joint_error_mm.iter().enumerate() {
            let name = joint_names.get(n).map(String::as_str).unwrap_or("?");
            let _ = writeln!(s, "{n:>3} {name:<16} {e:>9.4}");
        }
        let _ = writeln!(s, "\n# records");
        let _ = writeln!(s, "mean_error_mm {:e}", self.mean_error_mm);
        for (n, e) in self.per_joint_error_mm.iter().enumerate() {
            let _ = writeln!(s, "joint_error_mm {n} {e:e}");
        }
        for (t, f) in &self.success_curve {
            let _ = writeln!(s, "success {t} {f:e}");
        }
        s
    }
}

/// One `frame x y z …` line per pose after a header naming the frame convention.
pub fn write_predictions(ids: &[String], poses: &[Pose]) -> String {
    let mut s = String::from("# frame_id then J x y z in mm, camera frame: x right, y down, z forward\n");
    for (id, p) in ids.iter().zip(poses) {
        s.push_str(id);
        for j in &p.joints {
            let _ = write!(s, " {:e} {:e} {:e}", j[0], j[1], j[2]);
        }
        s.push('\n');
    }
    s
}

/// Inverse of [`write_predictions`].
pub fn read_predictions(text: &str) -> Result<(Vec<String>, Vec<Pose>)> {
    let mut ids = Vec::new();
    let mut poses = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let id = it.next().unwrap_or_default().to_string();
        let vals: Vec<f64> = it
            .map(|v| v.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::dim(format!("prediction line {} has a malformed number", n + 1)))?;
        if vals.len() % 3 != 0 {
            return Err(Error::dim(format!("prediction line {} is not a list of xyz triples", n + 1)));
        }
        ids.push(id);
        poses.push(Pose::new(vals.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()));
    }
    Ok((ids, poses))
}
