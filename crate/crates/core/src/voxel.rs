//! Depth reprojection, cubic cropping, and binary voxelization.
//!
//! Voxel indices are `(i, j, k)` along camera `(x, y, z)`; the flat layout is
//! `(i·R + j)·R + k`, matching a `[R, R, R]` tensor.

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::config(format!(
                "intrinsics need positive focal lengths, got fx={fx} fy={fy}"
            )));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }

    /// Pinhole projection of a camera-space point to `(u, v, depth)`.
    pub fn project(&self, p: Point3) -> (f64, f64, f64) {
        (p[0] * self.fx / p[2] + self.cx, p[1] * self.fy / p[2] + self.cy, p[2])
    }
}

/// Pixel rectangle `[left, right) × [top, bottom)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelBox {
    pub left: u32,
    pub top: u32,
    pub right: u32,
    pub bottom: u32,
}

impl PixelBox {
    pub fn width(&self) -> u32 {
        self.right - self.left
    }

    pub fn height(&self) -> u32 {
        self.bottom - self.top
    }
}

/// Depth image in millimetres; `0` marks a missing pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthFrame {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f32>,
    pub bbox: Option<PixelBox>,
}

impl DepthFrame {
    pub fn new(width: u32, height: u32, depth: Vec<f32>, bbox: Option<PixelBox>) -> Result<Self> {
        if depth.len() != (width as usize) * (height as usize) {
            return Err(Error::dim(format!(
                "depth buffer has {} pixels, frame is {width}x{height}",
                depth.len()
            )));
        }
        if depth.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::config("depth values must be finite and non-negative"));
        }
        Ok(DepthFrame {
            width,
            height,
            depth,
            bbox,
        })
    }

    pub fn at(&self, u: u32, v: u32) -> f32 {
        self.depth[(v * self.width + u) as usize]
    }
}

/// Camera-space points in millimetres.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        c.map(|v| v / n)
    }

    /// Per-axis `(min, max)`.
    pub fn bounds(&self) -> [(f64, f64); 3] {
        let mut b = [(f64::INFINITY, f64::NEG_INFINITY); 3];
        for p in &self.points {
            for a in 0..3 {
                b[a].0 = b[a].0.min(p[a]);
                b[a].1 = b[a].1.max(p[a]);
            }
        }
        b
    }
}

/// Back-projects every valid pixel through the pinhole model.
pub fn reproject(frame: &DepthFrame, k: &CameraIntrinsics) -> Result<PointCloud> {
    let mut points = Vec::new();
    for v in 0..frame.height {
        for u in 0..frame.width {
            let d = frame.at(u, v) as f64;
            if d > 0.0 {
                points.push([(u as f64 - k.cx) * d / k.fx, (v as f64 - k.cy) * d / k.fy, d]);
            }
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(PointCloud { points })
}

/// How the crop centre is derived from the cloud.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CenterMode {
    /// Arithmetic mean of the points.
    Centroid,
    /// Midpoint of the axis-aligned bounding box; the only rule for which an
    /// extent-sized cube is guaranteed to contain the whole cloud.
    #[default]
    BoundingBox,
}

pub const DEFAULT_MIN_SIDE_MM: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CubeCrop {
    pub center: Point3,
    pub side: f64,
}

impl CubeCrop {
    pub fn new(center: Point3, side: f64) -> Result<Self> {
        if !(side > 0.0) {
            return Err(Error::config(format!("cube side must be positive, got {side}")));
        }
        Ok(CubeCrop { center, side })
    }

    /// Voxel frame of this cube at resolution `r`.
    pub fn grid(&self, r: usize) -> Grid {
        let half = self.side / 2.0;
        Grid {
            resolution: r,
            origin: self.center.map(|c| c - half),
            voxel_size: self.side / r as f64,
        }
    }
}

/// Centred on the point centroid with side `max(extent_x, extent_y, extent_z, min_side)`.
pub fn compute_cube(cloud: &PointCloud, min_side: f64) -> Result<CubeCrop> {
    compute_cube_with(cloud, min_side, CenterMode::Centroid, 1.0)
}

/// [`compute_cube`] with a chosen centre rule and a multiplicative side margin.
pub fn compute_cube_with(cloud: &PointCloud, min_side: f64, center: CenterMode, margin: f64) -> Result<CubeCrop> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let b = cloud.bounds();
    let extent = b.iter().map(|(lo, hi)| hi - lo).fold(0.0, f64::max);
    let center = match center {
        CenterMode::Centroid => cloud.centroid(),
        CenterMode::BoundingBox => b.map(|(lo, hi)| 0.5 * (lo + hi)),
    };
    CubeCrop::new(center, (extent * margin).max(min_side))
}

/// The world↔voxel transform of a cubic grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    pub resolution: usize,
    /// World position of the outer corner of voxel `(0, 0, 0)`, mm.
    pub origin: Point3,
    pub voxel_size: f64,
}

impl Grid {
    pub fn voxel_count(&self) -> usize {
        self.resolution.pow(3)
    }

    /// Continuous voxel coordinate; voxel `i` spans `[i, i+1)`.
    pub fn world_to_voxel(&self, p: Point3) -> Point3 {
        [0, 1, 2].map(|a| (p[a] - self.origin[a]) / self.voxel_size)
    }

    pub fn voxel_to_world(&self, v: Point3) -> Point3 {
        [0, 1, 2].map(|a| self.origin[a] + v[a] * self.voxel_size)
    }

    pub fn voxel_center(&self, idx: [usize; 3]) -> Point3 {
        [0, 1, 2].map(|a| self.origin[a] + (idx[a] as f64 + 0.5) * self.voxel_size)
    }

    /// Containing voxel, clamped into `[0, R−1]` per axis.
    pub fn index_of(&self, p: Point3) -> [usize; 3] {
        let v = self.world_to_voxel(p);
        let top = (self.resolution - 1) as f64;
        v.map(|c| c.floor().clamp(0.0, top) as usize)
    }

    pub fn flat(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.resolution + idx[1]) * self.resolution + idx[2]
    }

    pub fn unflat(&self, flat: usize) -> [usize; 3] {
        let r = self.resolution;
        [flat / (r * r), (flat / r) % r, flat % r]
    }

    pub fn flat_center(&self, flat: usize) -> Point3 {
        self.voxel_center(self.unflat(flat))
    }

    /// Same cube sampled at a different resolution.
    pub fn with_resolution(&self, r: usize) -> Grid {
        let side = self.voxel_size * self.resolution as f64;
        Grid {
            resolution: r,
            origin: self.origin,
            voxel_size: side / r as f64,
        }
    }

    /// Chebyshev distance (in voxels) by which `p` lies outside the grid; `0` inside.
    pub fn outside_by(&self, p: Point3) -> f64 {
        let r = self.resolution as f64;
        self.world_to_voxel(p)
            .iter()
            .map(|&c| if c < 0.0 { -c } else if c > r { c - r } else { 0.0 })
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub grid: Grid,
    /// `R³` binary values, 1 = occupied.
    pub occupancy: Vec<u8>,
}

impl VoxelGrid {
    pub fn occupied(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        self.occupancy
            .iter()
            .enumerate()
            .filter(|(_, &o)| o != 0)
            .map(|(f, _)| self.grid.unflat(f))
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o != 0).count()
    }

    /// Occupancy as a `[1, R, R, R]` tensor of zeros and ones.
    pub fn to_tensor<T: crate::tensor::Real>(&self) -> crate::tensor::Tensor<T> {
        let r = self.grid.resolution;
        let values = self
            .occupancy
            .iter()
            .map(|&o| if o != 0 { T::one() } else { T::zero() })
            .collect();
        crate::tensor::Tensor::from_vec(&[1, r, r, r], values).expect("R^3 occupancy")
    }
}

/// Sets every voxel that contains at least one point (boundary points clamp inward).
pub fn voxelize(cloud: &PointCloud, cube: &CubeCrop, r: usize) -> Result<VoxelGrid> {
    if r < 2 {
        return Err(Error::config(format!("voxel resolution must be >= 2, got {r}")));
    }
    let cube = CubeCrop::new(cube.center, cube.side)?;
    let grid = cube.grid(r);
    let mut occupancy = vec![0u8; grid.voxel_count()];
    for &p in &cloud.points {
        occupancy[grid.flat(grid.index_of(p))] = 1;
    }
    Ok(VoxelGrid { grid, occupancy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(241.42, 241.42, 160.0, 120.0).unwrap()
    }

    #[test]
    fn principal_ray() {
        let mut depth = vec![0.0; 320 * 240];
        depth[120 * 320 + 160] = 420.0;
        let frame = DepthFrame::new(320, 240, depth, None).unwrap();
        let cloud = reproject(&frame, &k()).unwrap();
        assert_eq!(cloud.points, vec![[0.0, 0.0, 420.0]]);
    }

    #[test]
    fn all_missing_is_empty_cloud() {
        let frame = DepthFrame::new(4, 3, vec![0.0; 12], None).unwrap();
        assert!(matches!(reproject(&frame, &k()), Err(Error::EmptyCloud)));
    }

    #[test]
    fn plane_patch_closed_form() {
        let k = k();
        let mut depth = vec![0.0; 320 * 240];
        for v in 100..110 {
            for u in 150..160 {
                depth[v * 320 + u] = 500.0;
            }
        }
        let frame = DepthFrame::new(320, 240, depth, None).unwrap();
        let cloud = reproject(&frame, &k).unwrap();
        assert_eq!(cloud.len(), 100);
        for p in &cloud.points {
            assert_eq!(p[2], 500.0);
            let (u, v, _) = k.project(*p);
            assert!((u - u.round()).abs() < 1e-9 && (v - v.round()).abs() < 1e-9);
            assert!((150.0..160.0).contains(&u.round()) && (100.0..110.0).contains(&v.round()));
        }
    }

    #[test]
    fn rejects_bad_intrinsics() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(CameraIntrinsics::new(1.0, -1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn cube_examples() {
        let c = compute_cube(&PointCloud::new(vec![[0.0; 3], [100.0, 0.0, 0.0]]), 10.0).unwrap();
        assert_eq!(c.center, [50.0, 0.0, 0.0]);
        assert_eq!(c.side, 100.0);
        let c = compute_cube(&PointCloud::new(vec![[1.0, 2.0, 3.0]]), 200.0).unwrap();
        assert_eq!(c.center, [1.0, 2.0, 3.0]);
        assert_eq!(c.side, 200.0);
        assert!(compute_cube(&PointCloud::default(), 10.0).is_err());
    }

    #[test]
    fn corner_mapping_clamps() {
        let cloud = PointCloud::new(vec![[0.0; 3], [64.0; 3]]);
        let cube = CubeCrop::new([32.0; 3], 64.0).unwrap();
        let v = voxelize(&cloud, &cube, 64).unwrap();
        let occ: Vec<_> = v.occupied().collect();
        assert_eq!(occ, vec![[0, 0, 0], [63, 63, 63]]);
    }

    #[test]
    fn eight_mm_voxels_for_256_mm_cube() {
        let grid = CubeCrop::new([0.0, 0.0, 400.0], 256.0).unwrap().grid(32);
        assert_eq!(grid.voxel_size, 8.0);
        assert_eq!(grid.world_to_voxel(grid.origin), [0.0; 3]);
    }

    fn cloud_strategy() -> impl Strategy<Value = Vec<Point3>> {
        prop::collection::vec(prop::array::uniform3(-120.0f64..120.0), 1..200)
    }

    proptest! {
        #[test]
        fn voxelize_is_permutation_invariant(pts in cloud_strategy(), rot in 0usize..200) {
            let cloud = PointCloud::new(pts.clone());
            let cube = compute_cube(&cloud, 50.0).unwrap();
            let mut shuffled = pts.clone();
            let n = shuffled.len();
            shuffled.rotate_left(rot % n);
            shuffled.reverse();
            let a = voxelize(&cloud, &cube, 16).unwrap();
            let b = voxelize(&PointCloud::new(shuffled), &cube, 16).unwrap();
            prop_assert_eq!(a, b);
        }

        // Power-of-two factors keep every quotient bit-exact.
        #[test]
        fn binning_covariant_under_scaling(pts in cloud_strategy(), e in -4i32..5) {
            let s = 2f64.powi(e);
            let cloud = PointCloud::new(pts.clone());
            let cube = compute_cube(&cloud, 50.0).unwrap();
            let scaled = PointCloud::new(pts.iter().map(|p| p.map(|c| c * s)).collect());
            let scube = CubeCrop::new(cube.center.map(|c| c * s), cube.side * s).unwrap();
            let a = voxelize(&cloud, &cube, 16).unwrap();
            let b = voxelize(&scaled, &scube, 16).unwrap();
            prop_assert_eq!(a.occupancy, b.occupancy);
        }

        #[test]
        fn round_trip_within_half_diagonal(p in prop::array::uniform3(-99.0f64..99.0), side in 200.0f64..400.0, r in 2usize..65) {
            let grid = CubeCrop::new([0.0; 3], side).unwrap().grid(r);
            let c = grid.voxel_center(grid.index_of(p));
            let d = (0..3).map(|a| (c[a] - p[a]).powi(2)).sum::<f64>().sqrt();
            prop_assert!(d <= grid.voxel_size * 3f64.sqrt() / 2.0 + 1e-12);
        }
    }
}
