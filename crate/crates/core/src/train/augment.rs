//! In-plane rotation and per-axis aspect scaling of clouds and poses.

use rand::Rng;

use crate::error::{Error, Result};
use crate::heatmap::Pose;
use crate::voxel::{Point3, PointCloud};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Angles are drawn from `[−r, r]` degrees.
    pub rotation_range_deg: f64,
    pub aspect_range: (f64, f64),
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_range_deg: 30.0,
            aspect_range: (0.8, 1.2),
            enabled: true,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.aspect_range;
        if !(self.rotation_range_deg >= 0.0 && self.rotation_range_deg.is_finite()) {
            return Err(Error::config("rotation range must be a finite non-negative angle"));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config(format!("aspect range ({lo}, {hi}) must be positive and ordered")));
        }
        Ok(())
    }
}

/// One sampled transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub theta_rad: f64,
    pub scale_x: f64,
    pub scale_y: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        theta_rad: 0.0,
        scale_x: 1.0,
        scale_y: 1.0,
    };

    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let r = cfg.rotation_range_deg.to_radians();
        let (lo, hi) = cfg.aspect_range;
        AugmentDraw {
            theta_rad: if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 },
            scale_x: if hi > lo { rng.random_range(lo..=hi) } else { lo },
            scale_y: if hi > lo { rng.random_range(lo..=hi) } else { lo },
        }
    }

    /// Scales x and y about `center`, then rotates about the camera z axis
    /// through `center`. Written as a displacement so the identity draw
    /// returns the input bit for bit.
    pub fn apply_point(&self, p: Point3, center: Point3) -> Point3 {
        let (s, c) = self.theta_rad.sin_cos();
        let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
        [
            p[0] + (c * self.scale_x - 1.0) * dx - s * self.scale_y * dy,
            p[1] + s * self.scale_x * dx + (c * self.scale_y - 1.0) * dy,
            p[2],
        ]
    }

    /// Transforms cloud and pose about the cloud centroid.
    pub fn apply(&self, cloud: &PointCloud, pose: &Pose) -> (PointCloud, Pose) {
        let center = cloud.centroid();
        (
            PointCloud::new(cloud.points.iter().map(|&p| self.apply_point(p, center)).collect()),
            Pose::new(pose.joints.iter().map(|&p| self.apply_point(p, center)).collect()),
        )
    }
}

/// Draws and applies one transform; a disabled config returns the inputs unchanged.
pub fn augment(cloud: &PointCloud, pose: &Pose, cfg: &AugmentConfig, rng: &mut impl Rng) -> (PointCloud, Pose, AugmentDraw) {
    if !cfg.enabled {
        return (cloud.clone(), pose.clone(), AugmentDraw::IDENTITY);
    }
    let draw = AugmentDraw::sample(cfg, rng);
    let (c, p) = draw.apply(cloud, pose);
    (c, p, draw)
}
