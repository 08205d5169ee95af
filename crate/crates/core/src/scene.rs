//! Synthetic multi-view scenes with exact ground-truth correspondences.
//!
//! Two scene kinds are supported:
//!
//! - planar: every view is related to a reference plane by a homography,
//!   so correspondences are exact algebra;
//! - point cloud: pinhole cameras observe a set of 3D points. Each view gets
//!   a z-buffer built by splatting the points (radius [`SPLAT_RADIUS`]
//!   pixels); dense correspondences back-project a pixel at its z-buffer
//!   depth and reproject it, with an occlusion test against the target
//!   z-buffer at [`DEPTH_TOLERANCE`] relative depth.
//!
//! The oracle also simulates a noisy pairwise matcher to seed track
//! construction.

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{DenseWarpField, GridCoord};
use crate::groups::ImageGroup;
use crate::rng;
use crate::tracks::TrackToken;

/// Half-width, in pixels, of the square footprint each point writes into a
/// z-buffer.
pub const SPLAT_RADIUS: isize = 1;

/// Relative depth slack of the occlusion test.
pub const DEPTH_TOLERANCE: f64 = 0.005;

/// Homographies with a larger 2-norm condition number are rejected.
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Clone, Debug, PartialEq)]
pub struct PinholeCamera {
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl PinholeCamera {
    pub fn new(intrinsics: Matrix3<f64>, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(ortho <= 1e-9) {
            return Err(invalid(format!("camera rotation is not orthonormal (deviation {ortho:e})")));
        }
        if !(intrinsics[(0, 0)] > 0.0 && intrinsics[(1, 1)] > 0.0) {
            return Err(invalid("camera focal lengths must be positive"));
        }
        if intrinsics.try_inverse().is_none() {
            return Err(invalid("camera intrinsics are singular"));
        }
        Ok(Self { intrinsics, rotation, translation })
    }

    /// Camera at `center` looking at `target`, image y pointing along world +y.
    pub fn look_at(intrinsics: Matrix3<f64>, center: Vector3<f64>, target: Vector3<f64>) -> Result<Self> {
        let z = (target - center).normalize();
        let x = Vector3::new(0.0, 1.0, 0.0).cross(&z).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * center);
        Self::new(intrinsics, rotation, translation)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// `K [R | t]`.
    pub fn projection(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        rt.set_column(3, &self.translation);
        self.intrinsics * rt
    }

    pub fn depth_of(&self, point: &Vector3<f64>) -> f64 {
        (self.rotation * point + self.translation).z
    }

    /// Pixel and depth of `point`; `None` when it is not in front of the camera.
    pub fn project(&self, point: &Vector3<f64>) -> Option<(GridCoord, f64)> {
        let cam = self.rotation * point + self.translation;
        if cam.z <= 0.0 {
            return None;
        }
        let p = self.intrinsics * cam;
        Some((GridCoord::new(p.x / p.z, p.y / p.z), cam.z))
    }

    pub fn backproject(&self, pixel: GridCoord, depth: f64) -> Vector3<f64> {
        let ray = self.intrinsics.try_inverse().expect("validated intrinsics") * Vector3::new(pixel.x, pixel.y, 1.0);
        let cam = ray * (depth / ray.z);
        self.rotation.transpose() * (cam - self.translation)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SceneGeometry {
    /// Per-view homographies mapping view pixels to reference-plane coordinates.
    Planar {
        to_reference: Vec<Matrix3<f64>>,
    },
    PointCloud {
        cameras: Vec<PinholeCamera>,
        points: Vec<Vector3<f64>>,
    },
}

/// Synthetic scene answering ground-truth correspondence queries.
#[derive(Clone, Debug)]
pub struct SceneOracle {
    geometry: SceneGeometry,
    height: usize,
    width: usize,
    noise_seed: u64,
    /// Per-view z-buffers (point-cloud scenes only); `INFINITY` marks empty.
    depth: Vec<Vec<f64>>,
}

/// One raw multi-view match produced by the matcher simulator.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchSample {
    pub source: GridCoord,
    /// One entry per target slot of the group.
    pub targets: Vec<Option<GridCoord>>,
}

impl MatchSample {
    /// Visibility over all group slots, source first.
    pub fn visibility(&self) -> Vec<bool> {
        std::iter::once(true).chain(self.targets.iter().map(Option::is_some)).collect()
    }

    pub fn observations(&self) -> Vec<Option<GridCoord>> {
        std::iter::once(Some(self.source)).chain(self.targets.iter().copied()).collect()
    }

    pub fn to_track(&self) -> Result<TrackToken> {
        TrackToken::from_observations(&self.observations())
    }
}

fn condition_number(h: &Matrix3<f64>) -> f64 {
    let sv = h.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn apply_homography(h: &Matrix3<f64>, p: GridCoord) -> Option<GridCoord> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    if !(q.z > 0.0) {
        return None;
    }
    let out = GridCoord::new(q.x / q.z, q.y / q.z);
    out.is_finite().then_some(out)
}

impl SceneOracle {
    pub fn planar(to_reference: Vec<Matrix3<f64>>, height: usize, width: usize, noise_seed: u64) -> Result<Self> {
        if to_reference.len() < 2 {
            return Err(invalid("a scene needs at least two views"));
        }
        for (v, h) in to_reference.iter().enumerate() {
            let cond = condition_number(h);
            if !(cond < MAX_CONDITION) {
                return Err(Error::Degenerate(format!("homography of view {v} has condition number {cond:e}")));
            }
        }
        Self::check_size(height, width)?;
        Ok(Self { geometry: SceneGeometry::Planar { to_reference }, height, width, noise_seed, depth: Vec::new() })
    }

    pub fn point_cloud(
        cameras: Vec<PinholeCamera>,
        points: Vec<Vector3<f64>>,
        height: usize,
        width: usize,
        noise_seed: u64,
    ) -> Result<Self> {
        if cameras.len() < 2 {
            return Err(invalid("a scene needs at least two views"));
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(invalid("scene points must be finite"));
        }
        Self::check_size(height, width)?;
        let depth = cameras.iter().map(|cam| render_depth(cam, &points, height, width)).collect();
        Ok(Self { geometry: SceneGeometry::PointCloud { cameras, points }, height, width, noise_seed, depth })
    }

    fn check_size(height: usize, width: usize) -> Result<()> {
        if height < 2 || width < 2 {
            return Err(invalid("image size must be at least 2x2"));
        }
        Ok(())
    }

    /// Random planar scene: view 0 is the reference frame, the others are
    /// mild similarity-plus-perspective perturbations of it.
    pub fn random_planar(num_views: usize, height: usize, width: usize, seed: u64) -> Result<Self> {
        let mut r = rng::seeded(seed);
        let (cx, cy) = ((width - 1) as f64 / 2.0, (height - 1) as f64 / 2.0);
        let size = width.max(height) as f64;
        let mut hs = vec![Matrix3::identity()];
        for _ in 1..num_views {
            let theta = r.random_range(-8.0f64..8.0).to_radians();
            let scale = r.random_range(0.92..1.08);
            let tx = r.random_range(-0.08..0.08) * width as f64;
            let ty = r.random_range(-0.08..0.08) * height as f64;
            let px = r.random_range(-0.1..0.1) / size;
            let py = r.random_range(-0.1..0.1) / size;
            let (s, c) = theta.sin_cos();
            let center = Matrix3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
            let uncenter = Matrix3::new(1.0, 0.0, cx + tx, 0.0, 1.0, cy + ty, 0.0, 0.0, 1.0);
            let similarity = Matrix3::new(scale * c, -scale * s, 0.0, scale * s, scale * c, 0.0, 0.0, 0.0, 1.0);
            let perspective = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, px, py, 1.0);
            let reference_to_view = uncenter * similarity * perspective * center;
            let to_ref = reference_to_view
                .try_inverse()
                .ok_or_else(|| Error::Degenerate("random homography is singular".into()))?;
            hs.push(to_ref / to_ref[(2, 2)]);
        }
        Self::planar(hs, height, width, seed)
    }

    /// Planar scene whose views are pure translations of the reference frame:
    /// view `v` sees reference point `p` at `p - shifts[v]`.
    pub fn planar_translations(shifts: &[(f64, f64)], height: usize, width: usize, seed: u64) -> Result<Self> {
        let hs = shifts.iter().map(|&(dx, dy)| Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0)).collect();
        Self::planar(hs, height, width, seed)
    }

    /// Random point-cloud scene: points scattered over a back wall and a few
    /// tilted cards that partially occlude each other, observed by cameras
    /// on an arc.
    pub fn random_point_cloud(
        num_views: usize,
        height: usize,
        width: usize,
        num_points: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut r = rng::seeded(seed);
        struct Card {
            center: Vector3<f64>,
            u: Vector3<f64>,
            v: Vector3<f64>,
            half: (f64, f64),
        }
        let card = |center: Vector3<f64>, half: (f64, f64), yaw: f64, pitch: f64| {
            let (sy, cy) = yaw.sin_cos();
            let (sp, cp) = pitch.sin_cos();
            let u = Vector3::new(cy, 0.0, sy);
            let v = Vector3::new(-sy * sp, cp, cy * sp);
            Card { center, u, v, half }
        };
        let mut cards = vec![card(Vector3::new(0.0, 0.0, 1.6), (3.0, 2.5), 0.0, 0.0)];
        for _ in 0..3 {
            let center = Vector3::new(r.random_range(-0.8..0.8), r.random_range(-0.5..0.5), r.random_range(-0.6..0.6));
            let half = (r.random_range(0.3..0.6), r.random_range(0.3..0.6));
            let yaw = r.random_range(-20.0f64..20.0).to_radians();
            let pitch = r.random_range(-20.0f64..20.0).to_radians();
            cards.push(card(center, half, yaw, pitch));
        }
        let areas: Vec<f64> = cards.iter().map(|c| 4.0 * c.half.0 * c.half.1).collect();
        let total: f64 = areas.iter().sum();
        let mut points = Vec::with_capacity(num_points);
        for (c, a) in cards.iter().zip(&areas) {
            let n = ((num_points as f64) * a / total).round() as usize;
            for _ in 0..n {
                let s = r.random_range(-c.half.0..c.half.0);
                let t = r.random_range(-c.half.1..c.half.1);
                points.push(c.center + c.u * s + c.v * t);
            }
        }

        let f = 1.1 * width as f64;
        let k = Matrix3::new(f, 0.0, (width - 1) as f64 / 2.0, 0.0, f, (height - 1) as f64 / 2.0, 0.0, 0.0, 1.0);
        let look = Vector3::new(0.0, 0.0, 0.3);
        let mut cameras = Vec::with_capacity(num_views);
        for v in 0..num_views {
            let frac = if num_views > 1 { v as f64 / (num_views - 1) as f64 } else { 0.5 };
            let phi = (-20.0 + 40.0 * frac + r.random_range(-2.0..2.0)).to_radians();
            let center = Vector3::new(4.0 * phi.sin(), r.random_range(-0.4..0.1), 0.3 - 4.0 * phi.cos());
            cameras.push(PinholeCamera::look_at(k, center, look)?);
        }
        Self::point_cloud(cameras, points, height, width, seed)
    }

    pub fn geometry(&self) -> &SceneGeometry {
        &self.geometry
    }

    pub fn num_views(&self) -> usize {
        match &self.geometry {
            SceneGeometry::Planar { to_reference } => to_reference.len(),
            SceneGeometry::PointCloud { cameras, .. } => cameras.len(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn noise_seed(&self) -> u64 {
        self.noise_seed
    }

    pub fn cameras(&self) -> Option<&[PinholeCamera]> {
        match &self.geometry {
            SceneGeometry::PointCloud { cameras, .. } => Some(cameras),
            SceneGeometry::Planar { .. } => None,
        }
    }

    pub fn points(&self) -> Option<&[Vector3<f64>]> {
        match &self.geometry {
            SceneGeometry::PointCloud { points, .. } => Some(points),
            SceneGeometry::Planar { .. } => None,
        }
    }

    fn check_views(&self, a: usize, b: usize) -> Result<()> {
        let n = self.num_views();
        if a >= n || b >= n {
            return Err(invalid(format!("view index out of range for {n} views")));
        }
        if a == b {
            return Err(invalid("source and target views must differ"));
        }
        Ok(())
    }

    /// Homography mapping view `a` pixels to view `b` pixels (planar scenes).
    pub fn pair_homography(&self, a: usize, b: usize) -> Result<Matrix3<f64>> {
        let SceneGeometry::Planar { to_reference } = &self.geometry else {
            return Err(invalid("pair homographies exist only for planar scenes"));
        };
        let n = to_reference.len();
        if a >= n || b >= n {
            return Err(invalid(format!("view index out of range for {n} views")));
        }
        let inv_b = to_reference[b]
            .try_inverse()
            .ok_or_else(|| Error::Degenerate(format!("homography of view {b} is singular")))?;
        let h = inv_b * to_reference[a];
        let cond = condition_number(&h);
        if !(cond < MAX_CONDITION) {
            return Err(Error::Degenerate(format!("homography {a}->{b} has condition number {cond:e}")));
        }
        Ok(h / h[(2, 2)])
    }

    fn depth_at(&self, view: usize, p: GridCoord) -> Option<f64> {
        let x = p.x.round();
        let y = p.y.round();
        if x < 0.0 || y < 0.0 || x > (self.width - 1) as f64 || y > (self.height - 1) as f64 {
            return None;
        }
        let d = self.depth[view][y as usize * self.width + x as usize];
        d.is_finite().then_some(d)
    }

    /// 3D point seen at pixel `p` of `view` (point-cloud scenes), or the
    /// reference-plane coordinate with zero depth (planar scenes).
    pub fn scene_point(&self, view: usize, p: GridCoord) -> Option<Vector3<f64>> {
        match &self.geometry {
            SceneGeometry::Planar { to_reference } => {
                apply_homography(&to_reference[view], p).map(|q| Vector3::new(q.x, q.y, 0.0))
            }
            SceneGeometry::PointCloud { cameras, .. } => {
                let d = self.depth_at(view, p)?;
                Some(cameras[view].backproject(p, d))
            }
        }
    }

    /// Geometric transfer of `p` from view `a` to view `b`, without the
    /// in-frame or occlusion checks.
    pub fn transfer(&self, a: usize, b: usize, p: GridCoord) -> Option<GridCoord> {
        match &self.geometry {
            SceneGeometry::Planar { .. } => {
                let h = self.pair_homography(a, b).ok()?;
                apply_homography(&h, p)
            }
            SceneGeometry::PointCloud { cameras, .. } => {
                let x = self.scene_point(a, p)?;
                cameras[b].project(&x).map(|(q, _)| q)
            }
        }
    }

    /// Transfer of `p` from `a` to `b` when the point is visible in `b`.
    pub fn visible_transfer(&self, a: usize, b: usize, p: GridCoord) -> Option<GridCoord> {
        match &self.geometry {
            SceneGeometry::Planar { .. } => self.transfer(a, b, p).filter(|q| q.inside(self.height, self.width)),
            SceneGeometry::PointCloud { cameras, .. } => {
                let x = self.scene_point(a, p)?;
                self.visible_projection(cameras, b, &x)
            }
        }
    }

    fn visible_projection(&self, cameras: &[PinholeCamera], view: usize, x: &Vector3<f64>) -> Option<GridCoord> {
        let (q, z) = cameras[view].project(x)?;
        if !q.inside(self.height, self.width) {
            return None;
        }
        let front = self.depth_at(view, q)?;
        (z <= front * (1.0 + DEPTH_TOLERANCE)).then_some(q)
    }

    /// Dense ground-truth warp `a -> b` at base resolution. Covisible pixels
    /// get confidence 1, everything else 0.
    pub fn gt_warp(&self, a: usize, b: usize) -> Result<DenseWarpField> {
        self.gt_warp_at_stride(a, b, 1)
    }

    /// Ground-truth warp at pyramid stride `stride`, in that level's pixel
    /// units.
    pub fn gt_warp_at_stride(&self, a: usize, b: usize, stride: u32) -> Result<DenseWarpField> {
        self.check_views(a, b)?;
        let s = stride as usize;
        if s == 0 || !stride.is_power_of_two() || self.height % s != 0 || self.width % s != 0 {
            return Err(invalid(format!("stride {stride} does not divide the {}x{} image", self.height, self.width)));
        }
        let (h, w) = (self.height / s, self.width / s);
        let homography = match &self.geometry {
            SceneGeometry::Planar { .. } => Some(self.pair_homography(a, b)?),
            SceneGeometry::PointCloud { .. } => None,
        };
        let mut targets = Vec::with_capacity(h * w);
        let mut confidence = Vec::with_capacity(h * w);
        let sf = stride as f64;
        for y in 0..h {
            for x in 0..w {
                let p = GridCoord::new((x * s) as f64, (y * s) as f64);
                let (raw, visible) = match &homography {
                    Some(hm) => {
                        let q = apply_homography(hm, p);
                        (q, q.filter(|q| q.inside(self.height, self.width)))
                    }
                    None => {
                        let q = self.transfer(a, b, p);
                        (q, self.visible_transfer(a, b, p))
                    }
                };
                targets.push(raw.map_or(GridCoord::MISSING, |q| q.scale(1.0 / sf)));
                confidence.push(if visible.is_some() { 1.0 } else { 0.0 });
            }
        }
        DenseWarpField::new(h, w, targets, confidence, a, b)
    }

    /// Draws `n` noisy multi-view matches at random covisible source pixels.
    ///
    /// Each visible target observation is the ground truth plus isotropic
    /// Gaussian noise, or with probability `outlier_rate` a uniformly random
    /// in-image coordinate. The generator is a sub-stream of the scene's
    /// noise seed keyed by the group composition.
    pub fn simulate_matcher(
        &self,
        group: &ImageGroup,
        n: usize,
        noise_sigma: f64,
        outlier_rate: f64,
    ) -> Result<Vec<MatchSample>> {
        if n == 0 {
            return Err(invalid("simulate_matcher needs n >= 1"));
        }
        if !(0.0..1.0).contains(&outlier_rate) {
            return Err(invalid(format!("outlier rate {outlier_rate} outside [0, 1)")));
        }
        if !(noise_sigma >= 0.0) {
            return Err(invalid("noise sigma must be non-negative"));
        }
        let warps = group.targets().iter().map(|&t| self.gt_warp(group.source(), t)).collect::<Result<Vec<_>>>()?;
        let covisible: Vec<usize> =
            (0..self.height * self.width).filter(|&i| warps.iter().any(|w| w.confidence()[i] > 0.0)).collect();
        if covisible.is_empty() {
            return Err(Error::InsufficientData(format!(
                "source view {} shares no covisible pixels with its targets",
                group.source()
            )));
        }
        let stream = group.views().fold(0xcbf2_9ce4_8422_2325u64, |h, v| (h ^ v as u64).wrapping_mul(0x0100_0000_01b3));
        let mut r = rng::substream(self.noise_seed, stream);
        let (wmax, hmax) = ((self.width - 1) as f64, (self.height - 1) as f64);
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let i = covisible[r.random_range(0..covisible.len())];
            let source = GridCoord::new((i % self.width) as f64, (i / self.width) as f64);
            let targets = warps
                .iter()
                .map(|w| {
                    if w.confidence()[i] <= 0.0 {
                        return None;
                    }
                    let t = if r.random::<f64>() < outlier_rate {
                        GridCoord::new(r.random_range(0.0..=wmax), r.random_range(0.0..=hmax))
                    } else {
                        let gt = w.targets()[i];
                        let nx: f64 = StandardNormal.sample(&mut r);
                        let ny: f64 = StandardNormal.sample(&mut r);
                        GridCoord::new(
                            (gt.x + noise_sigma * nx).clamp(0.0, wmax),
                            (gt.y + noise_sigma * ny).clamp(0.0, hmax),
                        )
                    };
                    Some(t)
                })
                .collect();
            samples.push(MatchSample { source, targets });
        }
        Ok(samples)
    }

    /// Per-slot distance between a track's stored coordinates and the
    /// ground-truth transfer of its source coordinate. Invisible slots and
    /// the source slot are `None`; a visible slot with no ground-truth
    /// transfer reports infinity.
    pub fn gt_track_error(&self, group: &ImageGroup, track: &TrackToken) -> Result<Vec<Option<f64>>> {
        if track.num_views() != group.num_views() {
            return Err(invalid(format!(
                "track has {} views but the group has {}",
                track.num_views(),
                group.num_views()
            )));
        }
        if track.length() < 2 {
            return Err(invalid("track is visible only in its source view"));
        }
        let src = track.source();
        Ok((0..track.num_views())
            .map(|slot| {
                if slot == 0 {
                    return None;
                }
                let c = track.coord(slot)?;
                Some(self.transfer(group.source(), group.view(slot), src).map_or(f64::INFINITY, |gt| gt.distance(c)))
            })
            .collect())
    }

    pub fn to_file(&self) -> SceneFile {
        let image_size = [self.height, self.width];
        match &self.geometry {
            SceneGeometry::Planar { to_reference } => SceneFile::PlanarHomography {
                image_size,
                seed: self.noise_seed,
                homographies: to_reference.iter().map(mat3_rows).collect(),
            },
            SceneGeometry::PointCloud { cameras, points } => SceneFile::PointCloud {
                image_size,
                seed: self.noise_seed,
                cameras: cameras
                    .iter()
                    .map(|c| CameraRecord {
                        intrinsics: mat3_rows(&c.intrinsics),
                        rotation: mat3_rows(&c.rotation),
                        translation: [c.translation.x, c.translation.y, c.translation.z],
                    })
                    .collect(),
                points: points.iter().map(|p| [p.x, p.y, p.z]).collect(),
            },
        }
    }

    pub fn from_file(file: &SceneFile) -> Result<Self> {
        match file {
            SceneFile::PlanarHomography { image_size, seed, homographies } => Self::planar(
                homographies.iter().map(|m| Matrix3::from_row_slice(m)).collect(),
                image_size[0],
                image_size[1],
                *seed,
            ),
            SceneFile::PointCloud { image_size, seed, cameras, points } => Self::point_cloud(
                cameras
                    .iter()
                    .map(|c| {
                        PinholeCamera::new(
                            Matrix3::from_row_slice(&c.intrinsics),
                            Matrix3::from_row_slice(&c.rotation),
                            Vector3::from_row_slice(&c.translation),
                        )
                    })
                    .collect::<Result<_>>()?,
                points.iter().map(|p| Vector3::from_row_slice(p)).collect(),
                image_size[0],
                image_size[1],
                *seed,
            ),
        }
    }
}

fn mat3_rows(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
    out
}

fn render_depth(cam: &PinholeCamera, points: &[Vector3<f64>], height: usize, width: usize) -> Vec<f64> {
    let mut depth = vec![f64::INFINITY; height * width];
    for p in points {
        let Some((q, z)) = cam.project(p) else {
            continue;
        };
        let (cx, cy) = (q.x.round(), q.y.round());
        if !cx.is_finite() || !cy.is_finite() {
            continue;
        }
        for dy in -SPLAT_RADIUS..=SPLAT_RADIUS {
            for dx in -SPLAT_RADIUS..=SPLAT_RADIUS {
                let (x, y) = (cx + dx as f64, cy + dy as f64);
                if x < 0.0 || y < 0.0 || x >= width as f64 || y >= height as f64 {
                    continue;
                }
                let i = y as usize * width + x as usize;
                if z < depth[i] {
                    depth[i] = z;
                }
            }
        }
    }
    depth
}

/// On-disk scene description (JSON). Matrices are row-major; `image_size`
/// is `[height, width]`. Planar homographies map view pixels to the
/// reference plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SceneFile {
    PlanarHomography { image_size: [usize; 2], seed: u64, homographies: Vec<[f64; 9]> },
    PointCloud { image_size: [usize; 2], seed: u64, cameras: Vec<CameraRecord>, points: Vec<[f64; 3]> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub intrinsics: [f64; 9],
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}
