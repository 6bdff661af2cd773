//! Skeleton layout and Gaussian ground-truth heatmaps for joints and bones.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::voxel::{Grid, Point3};

/// Targets below `exp(-TRUNCATION_SIGMAS² / 2)` are stored as zero.
pub const TRUNCATION_SIGMAS: f64 = 3.0;
/// Bone tube width relative to the joint Gaussian.
pub const BONE_SIGMA_RATIO: f64 = 0.5;

/// Joint names plus `(parent, child)` bone pairs forming a tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Skeleton {
    pub name: String,
    pub joint_names: Vec<String>,
    pub bones: Vec<(usize, usize)>,
}

const MSRA_JOINTS: [&str; 21] = [
    "wrist",
    "index_mcp",
    "index_pip",
    "index_dip",
    "index_tip",
    "middle_mcp",
    "middle_pip",
    "middle_dip",
    "middle_tip",
    "ring_mcp",
    "ring_pip",
    "ring_dip",
    "ring_tip",
    "little_mcp",
    "little_pip",
    "little_dip",
    "little_tip",
    "thumb_mcp",
    "thumb_pip",
    "thumb_dip",
    "thumb_tip",
];

impl Skeleton {
    pub fn new(name: impl Into<String>, joint_names: Vec<String>, bones: Vec<(usize, usize)>) -> Result<Self> {
        let s = Skeleton {
            name: name.into(),
            joint_names,
            bones,
        };
        s.validate()?;
        Ok(s)
    }

    /// Wrist root plus a four-joint chain per finger in dataset order
    /// (index, middle, ring, little, thumb).
    pub fn msra() -> Self {
        let joint_names = MSRA_JOINTS.iter().map(|s| s.to_string()).collect();
        let mut bones = Vec::with_capacity(20);
        for finger in 0..5 {
            let base = 1 + 4 * finger;
            bones.push((0, base));
            for j in 0..3 {
                bones.push((base + j, base + j + 1));
            }
        }
        Skeleton {
            name: "msra".into(),
            joint_names,
            bones,
        }
    }

    pub fn joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn bone_count(&self) -> usize {
        self.bones.len()
    }

    /// Indices in range, `B == J − 1`, every joint reachable from a single root.
    pub fn validate(&self) -> Result<()> {
        let j = self.joints();
        if j == 0 {
            return Err(Error::config("skeleton has no joints"));
        }
        if self.bones.len() + 1 != j {
            return Err(Error::config(format!(
                "skeleton `{}` has {j} joints and {} bones; a tree needs {}",
                self.name,
                self.bones.len(),
                j - 1
            )));
        }
        let mut parent = vec![None; j];
        for &(p, c) in &self.bones {
            if p >= j || c >= j || p == c {
                return Err(Error::config(format!("bone ({p}, {c}) is invalid for {j} joints")));
            }
            if parent[c].replace(p).is_some() {
                return Err(Error::config(format!("joint {c} has two parents")));
            }
        }
        let roots: Vec<_> = (0..j).filter(|&i| parent[i].is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::config(format!("skeleton needs exactly one root, found {roots:?}")));
        }
        for start in 0..j {
            let (mut cur, mut steps) = (start, 0);
            while let Some(p) = parent[cur] {
                cur = p;
                steps += 1;
                if steps > j {
                    return Err(Error::config("skeleton bones contain a cycle"));
                }
            }
        }
        Ok(())
    }

    /// Parent index per joint (`None` for the root).
    pub fn parents(&self) -> Vec<Option<usize>> {
        let mut parent = vec![None; self.joints()];
        for &(p, c) in &self.bones {
            parent[c] = Some(p);
        }
        parent
    }

    /// Parses the plain-text preset format:
    ///
    /// ```text
    /// name = msra
    /// joints = wrist index_mcp ...
    /// bones = 0-1 1-2 ...
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let (mut name, mut joints, mut bones) = (None, None, None);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("skeleton line {}: expected `key = value`", lineno + 1)))?;
            match key.trim() {
                "name" => name = Some(value.trim().to_string()),
                "joints" => joints = Some(value.split_whitespace().map(str::to_string).collect::<Vec<_>>()),
                "bones" => {
                    let mut v = Vec::new();
                    for pair in value.split_whitespace() {
                        let (a, b) = pair
                            .split_once('-')
                            .ok_or_else(|| Error::config(format!("bone `{pair}` is not `parent-child`")))?;
                        let parse = |s: &str| {
                            s.parse::<usize>()
                                .map_err(|_| Error::config(format!("bone index `{s}` is not an integer")))
                        };
                        v.push((parse(a)?, parse(b)?));
                    }
                    bones = Some(v);
                }
                other => return Err(Error::config(format!("unknown skeleton key `{other}`"))),
            }
        }
        Skeleton::new(
            name.unwrap_or_else(|| "custom".into()),
            joints.ok_or_else(|| Error::config("skeleton is missing `joints`"))?,
            bones.ok_or_else(|| Error::config("skeleton is missing `bones`"))?,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        Skeleton::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("name = {}\njoints = {}\nbones =", self.name, self.joint_names.join(" "));
        for (p, c) in &self.bones {
            write!(s, " {p}-{c}").unwrap();
        }
        s.push('\n');
        s
    }
}

/// Joint positions in millimetres, camera frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub joints: Vec<Point3>,
}

impl Pose {
    pub fn new(joints: Vec<Point3>) -> Self {
        Pose { joints }
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }
}

/// `C` channels of `R³` values, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapVolume {
    pub channels: usize,
    pub resolution: usize,
    pub values: Vec<f64>,
}

impl HeatmapVolume {
    pub fn zeros(channels: usize, resolution: usize) -> Self {
        HeatmapVolume {
            channels,
            resolution,
            values: vec![0.0; channels * resolution.pow(3)],
        }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.resolution.pow(3);
        &self.values[c * n..][..n]
    }

    fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.resolution.pow(3);
        &mut self.values[c * n..][..n]
    }

    /// `[C, R, R, R]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let r = self.resolution;
        Tensor::from_vec(&[self.channels, r, r, r], self.values.iter().map(|&v| T::of(v)).collect())
            .expect("C·R³ values")
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        match *t.shape() {
            [c, a, b, d] if a == b && b == d => Ok(HeatmapVolume {
                channels: c,
                resolution: a,
                values: t.values().iter().map(|v| v.wide()).collect(),
            }),
            _ => Err(Error::dim(format!("heatmap tensor must be [C, R, R, R], got {:?}", t.shape()))),
        }
    }
}

fn check_inside(pose: &Pose, grid: &Grid) -> Result<()> {
    for (index, &p) in pose.joints.iter().enumerate() {
        let distance_voxels = grid.outside_by(p);
        if !p.iter().all(|c| c.is_finite()) || distance_voxels > 1.0 {
            return Err(Error::OutOfVolume {
                index,
                distance_voxels,
            });
        }
    }
    Ok(())
}

fn dist2(a: Point3, b: Point3) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Squared distance from `p` to the segment `a`–`b`.
pub fn segment_dist2(p: Point3, a: Point3, b: Point3) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let len2 = ab.iter().map(|v| v * v).sum::<f64>();
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1] + (p[2] - a[2]) * ab[2]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist2(p, [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]])
}

/// Voxel index range covering world interval `[lo, hi]` on one axis.
fn axis_range(grid: &Grid, axis: usize, lo: f64, hi: f64) -> std::ops::Range<usize> {
    let r = grid.resolution as f64;
    let a = ((lo - grid.origin[axis]) / grid.voxel_size).floor().clamp(0.0, r) as usize;
    let b = ((hi - grid.origin[axis]) / grid.voxel_size).ceil().clamp(0.0, r) as usize;
    a..b.max(a)
}

/// Rasterizes `exp(−d²/2σ²)` where `d²` is given by `dist2_fn`, limited to
/// the world-space box `[lo, hi]` and truncated at [`TRUNCATION_SIGMAS`].
fn splat(out: &mut [f64], grid: &Grid, sigma: f64, lo: Point3, hi: Point3, dist2_fn: impl Fn(Point3) -> f64) {
    let reach = TRUNCATION_SIGMAS * sigma;
    let cut2 = reach * reach;
    let ranges: Vec<_> = (0..3).map(|a| axis_range(grid, a, lo[a] - reach, hi[a] + reach)).collect();
    for i in ranges[0].clone() {
        for j in ranges[1].clone() {
            for k in ranges[2].clone() {
                let d2 = dist2_fn(grid.voxel_center([i, j, k]));
                if d2 <= cut2 {
                    out[grid.flat([i, j, k])] = (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
}

/// One Gaussian per joint with σ equal to the voxel length.
pub fn joint_targets(pose: &Pose, grid: &Grid) -> Result<HeatmapVolume> {
    check_inside(pose, grid)?;
    let sigma = grid.voxel_size;
    let mut vol = HeatmapVolume::zeros(pose.len(), grid.resolution);
    for (n, &p) in pose.joints.iter().enumerate() {
        splat(vol.channel_mut(n), grid, sigma, p, p, |c| dist2(c, p));
    }
    Ok(vol)
}

/// One Gaussian tube per bone around the segment joining its two joints,
/// σ = [`BONE_SIGMA_RATIO`] · voxel length.
pub fn bone_targets(pose: &Pose, skeleton: &Skeleton, grid: &Grid) -> Result<HeatmapVolume> {
    if pose.len() != skeleton.joints() {
        return Err(Error::dim(format!(
            "pose has {} joints, skeleton `{}` has {}",
            pose.len(),
            skeleton.name,
            skeleton.joints()
        )));
    }
    check_inside(pose, grid)?;
    let sigma = BONE_SIGMA_RATIO * grid.voxel_size;
    let mut vol = HeatmapVolume::zeros(skeleton.bone_count(), grid.resolution);
    for (b, &(pi, ci)) in skeleton.bones.iter().enumerate() {
        let (a, c) = (pose.joints[pi], pose.joints[ci]);
        let lo = [0, 1, 2].map(|i| a[i].min(c[i]));
        let hi = [0, 1, 2].map(|i| a[i].max(c[i]));
        splat(vol.channel_mut(b), grid, sigma, lo, hi, |v| segment_dist2(v, a, c));
    }
    Ok(vol)
}
