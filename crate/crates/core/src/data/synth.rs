//! Procedural articulated hands: forward kinematics over a skeleton tree
//! plus points scattered on a tube around every bone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::heatmap::{Pose, Skeleton};
use crate::sample::RawSample;
use crate::voxel::{Point3, PointCloud};

type Mat3 = [[f64; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

fn apply(m: &Mat3, v: Point3) -> Point3 {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

fn rot_z(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

fn rot_y(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_x(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

/// Closed interval; `lo == hi` is a fixed value.
pub type Range = (f64, f64);

fn draw(rng: &mut impl Rng, r: Range) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..=r.1)
    } else {
        r.0
    }
}

/// Per-bone kinematic description, angles in radians.
///
/// A bone's frame is its parent's frame rotated by `yaw + abduction` about
/// local z and then `pitch + flexion` about local y; the bone points along
/// the resulting local x.
#[derive(Clone, Debug, PartialEq)]
pub struct BoneSpec {
    pub length_mm: f64,
    pub rest_yaw: f64,
    pub rest_pitch: f64,
    pub flexion: Range,
    pub abduction: Range,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthHandSpec {
    pub skeleton: Skeleton,
    /// Indexed like `skeleton.bones`.
    pub bones: Vec<BoneSpec>,
    /// Root orientation: rotations about camera z, then x, then y.
    pub global: [Range; 3],
    pub root: Point3,
    pub points_per_bone: usize,
    pub tube_radius_mm: f64,
    /// Scale of the per-point displacement; magnitudes are clipped at 3σ.
    pub noise_sigma_mm: f64,
    pub seed: u64,
}

impl SynthHandSpec {
    /// A 21-joint hand matching [`Skeleton::msra`], palm facing the camera.
    pub fn msra_hand(seed: u64) -> Self {
        let fingers: [(f64, f64, [f64; 3], Range); 5] = [
            // (yaw of metacarpal, metacarpal length, phalanx lengths, flexion range)
            (0.22, 80.0, [40.0, 25.0, 20.0], (0.0, 1.2)),
            (0.07, 78.0, [45.0, 28.0, 22.0], (0.0, 1.2)),
            (-0.08, 74.0, [42.0, 26.0, 20.0], (0.0, 1.2)),
            (-0.24, 70.0, [32.0, 20.0, 18.0], (0.0, 1.2)),
            (0.85, 40.0, [35.0, 30.0, 25.0], (0.0, 0.8)),
        ];
        let mut bones = Vec::new();
        for (yaw, meta, phal, flex) in fingers {
            bones.push(BoneSpec {
                length_mm: meta,
                rest_yaw: yaw,
                rest_pitch: 0.0,
                flexion: (-0.1, 0.1),
                abduction: (0.0, 0.0),
            });
            for (n, len) in phal.into_iter().enumerate() {
                bones.push(BoneSpec {
                    length_mm: len,
                    rest_yaw: if n == 0 { -yaw * 0.5 } else { 0.0 },
                    rest_pitch: 0.0,
                    flexion: flex,
                    abduction: if n == 0 { (-0.2, 0.2) } else { (0.0, 0.0) },
                });
            }
        }
        SynthHandSpec {
            skeleton: Skeleton::msra(),
            bones,
            global: [(-0.5, 0.5), (-0.3, 0.3), (-0.3, 0.3)],
            root: [0.0, 0.0, 400.0],
            points_per_bone: 40,
            tube_radius_mm: 6.0,
            noise_sigma_mm: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.skeleton.validate()?;
        if self.bones.len() != self.skeleton.bone_count() {
            return Err(Error::config(format!(
                "{} bone specs for {} skeleton bones",
                self.bones.len(),
                self.skeleton.bone_count()
            )));
        }
        let ordered = |r: Range| r.0 <= r.1 && r.0.is_finite() && r.1.is_finite();
        for (i, b) in self.bones.iter().enumerate() {
            if !(b.length_mm > 0.0) || !ordered(b.flexion) || !ordered(b.abduction) {
                return Err(Error::config(format!("bone spec {i} has a non-positive length or an invalid range")));
            }
        }
        if !self.global.iter().all(|&r| ordered(r)) || !(self.tube_radius_mm >= 0.0) || !(self.noise_sigma_mm >= 0.0) {
            return Err(Error::config("synthetic hand ranges, radius and noise must be valid"));
        }
        if self.points_per_bone == 0 {
            return Err(Error::config("points_per_bone must be positive"));
        }
        Ok(())
    }

    /// Every joint range multiplied by `s` (0 freezes the pose).
    pub fn with_angle_scale(mut self, s: f64) -> Self {
        let sc = |r: Range| (r.0 * s, r.1 * s);
        for b in &mut self.bones {
            b.flexion = sc(b.flexion);
            b.abduction = sc(b.abduction);
        }
        self.global = self.global.map(sc);
        self
    }

    /// Joint positions by forward kinematics for one set of sampled angles.
    pub fn pose(&self, rng: &mut impl Rng) -> Pose {
        let j = self.skeleton.joints();
        let g = [draw(rng, self.global[0]), draw(rng, self.global[1]), draw(rng, self.global[2])];
        let root_frame = matmul(&matmul(&rot_z(g[0]), &rot_x(g[1])), &rot_y(g[2]));
        let mut frames: Vec<Option<Mat3>> = vec![None; j];
        let mut joints: Vec<Option<Point3>> = vec![None; j];
        let root = self.skeleton.parents().iter().position(Option::is_none).expect("validated tree");
        frames[root] = Some(root_frame);
        joints[root] = Some(self.root);
        // Angles are drawn in bone order so a pose is a pure function of the rng state.
        let angles: Vec<(f64, f64)> = self.bones.iter().map(|b| (draw(rng, b.flexion), draw(rng, b.abduction))).collect();
        while joints.iter().any(Option::is_none) {
            for (b, &(p, c)) in self.skeleton.bones.iter().enumerate() {
                if joints[c].is_some() {
                    continue;
                }
                let (Some(fp), Some(jp)) = (frames[p], joints[p]) else { continue };
                let spec = &self.bones[b];
                let (flex, abd) = angles[b];
                let f = matmul(&matmul(&fp, &rot_z(spec.rest_yaw + abd)), &rot_y(spec.rest_pitch + flex));
                let d = apply(&f, [spec.length_mm, 0.0, 0.0]);
                frames[c] = Some(f);
                joints[c] = Some([jp[0] + d[0], jp[1] + d[1], jp[2] + d[2]]);
            }
        }
        Pose::new(joints.into_iter().map(Option::unwrap).collect())
    }

    /// Points on a radius-`tube_radius_mm` tube around every bone plus clipped noise.
    pub fn scatter(&self, pose: &Pose, rng: &mut impl Rng) -> PointCloud {
        let noise = Normal::new(0.0, self.noise_sigma_mm.max(0.0)).expect("finite sigma");
        let clip = 3.0 * self.noise_sigma_mm;
        let mut points = Vec::with_capacity(self.points_per_bone * self.skeleton.bone_count());
        for &(p, c) in &self.skeleton.bones {
            let (a, b) = (pose.joints[p], pose.joints[c]);
            let axis = normalize([b[0] - a[0], b[1] - a[1], b[2] - a[2]]);
            let (u, v) = orthonormal_pair(axis);
            for _ in 0..self.points_per_bone {
                let t: f64 = rng.random_range(0.0..=1.0);
                let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let (s, co) = phi.sin_cos();
                let r = self.tube_radius_mm;
                let mut q = [0, 1, 2].map(|i| a[i] + t * (b[i] - a[i]) + r * (co * u[i] + s * v[i]));
                if self.noise_sigma_mm > 0.0 {
                    let dir = normalize([0, 1, 2].map(|_| noise.sample(rng)));
                    let mag = noise.sample(rng).abs().min(clip);
                    for i in 0..3 {
                        q[i] += mag * dir[i];
                    }
                }
                points.push(q);
            }
        }
        PointCloud::new(points)
    }

    /// `n` samples; sample `i` depends only on `(seed, i)`.
    pub fn generate(&self, n: usize) -> Result<Vec<RawSample>> {
        self.validate()?;
        Ok((0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(i as u64);
                let pose = self.pose(&mut rng);
                let cloud = self.scatter(&pose, &mut rng);
                RawSample { cloud, pose }
            })
            .collect())
    }
}

fn normalize(v: Point3) -> Point3 {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n > 0.0 {
        v.map(|c| c / n)
    } else {
        [1.0, 0.0, 0.0]
    }
}

fn cross(a: Point3, b: Point3) -> Point3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn orthonormal_pair(axis: Point3) -> (Point3, Point3) {
    let helper = if axis[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = normalize(cross(axis, helper));
    (u, cross(axis, u))
}
