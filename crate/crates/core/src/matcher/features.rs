//! Feature providers: where the matcher gets its per-view, per-stride grids.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use nalgebra::Vector3;
use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::grid::{FeatureGrid, GridCoord};
use crate::rng;
use crate::scene::{SceneGeometry, SceneOracle};

pub trait FeatureProvider {
    /// Feature grid of `view` at pyramid `stride`. Repeated calls must return
    /// identical grids.
    fn features(&self, view: usize, stride: u32) -> Result<FeatureGrid>;
}

/// Precomputed grids keyed by view and stride.
#[derive(Clone, Debug, Default)]
pub struct StaticFeatures {
    grids: BTreeMap<(usize, u32), FeatureGrid>,
}

impl StaticFeatures {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, view: usize, grid: FeatureGrid) {
        self.grids.insert((view, grid.stride()), grid);
    }
}

impl FeatureProvider for StaticFeatures {
    fn features(&self, view: usize, stride: u32) -> Result<FeatureGrid> {
        self.grids.get(&(view, stride)).cloned().ok_or(Error::MissingStride { view, stride })
    }
}

/// Number of random-direction texture waves mixed into oracle features.
const TEXTURE_WAVES: usize = 4;

pub const DEFAULT_MIN_WAVELENGTH: f64 = 64.0;

/// Hand-crafted features computed from the scene's ground truth: multi-scale
/// sinusoidal encodings of the scene coordinate seen at each pixel plus a few
/// seeded texture waves. Corresponding pixels in different views therefore
/// carry identical features, and similarity falls off with scene distance.
///
/// At stride `s` the shortest wavelength is the larger of `4 s` and the
/// configured minimum (64 pixels by default), and wavelengths double up to
/// four times the image size. Texture waves use 1.5 times the shortest
/// wavelength. Smooth features keep the bilinear-sampled correlation nearly
/// symmetric around the true match, which is what makes sub-pixel readouts
/// accurate. Features are unit-norm; pixels that see nothing get zeros.
#[derive(Clone, Debug)]
pub struct OracleFeatures<'a> {
    scene: &'a SceneOracle,
    /// Scene units to pixel-like units.
    scale: f64,
    axes: usize,
    min_wavelength: f64,
    /// Unit direction and phase of each texture wave.
    texture: Vec<(Vector3<f64>, f64)>,
}

impl<'a> OracleFeatures<'a> {
    pub fn new(scene: &'a SceneOracle, seed: u64) -> Self {
        let (scale, axes) = match scene.geometry() {
            SceneGeometry::Planar { .. } => (1.0, 2),
            SceneGeometry::PointCloud { cameras, points } => {
                // pixels per scene unit at the mean viewing depth
                let cam = &cameras[0];
                let depth = if points.is_empty() {
                    1.0
                } else {
                    points.iter().map(|p| cam.depth_of(p).abs()).sum::<f64>() / points.len() as f64
                };
                (cam.intrinsics()[(0, 0)] / depth.max(1e-9), 3)
            }
        };
        let mut r = rng::seeded(seed);
        // evenly spaced in-plane directions keep the correlation peak
        // isotropic; point clouds also tilt them out of plane
        let offset = r.random_range(0.0..std::f64::consts::PI);
        let texture = (0..TEXTURE_WAVES)
            .map(|k| {
                let angle = offset + k as f64 * std::f64::consts::PI / TEXTURE_WAVES as f64;
                let tilt = if axes == 3 { r.random_range(-0.5..0.5) } else { 0.0 };
                let d = Vector3::new(angle.cos(), angle.sin(), tilt);
                (d.normalize(), r.random_range(0.0..TAU))
            })
            .collect();
        Self { scene, scale, axes, min_wavelength: DEFAULT_MIN_WAVELENGTH, texture }
    }

    pub fn with_min_wavelength(mut self, pixels: f64) -> Result<Self> {
        if !(pixels > 0.0) || !pixels.is_finite() {
            return Err(invalid(format!("minimum wavelength must be positive, got {pixels}")));
        }
        self.min_wavelength = pixels;
        Ok(self)
    }

    fn shortest(&self, stride: u32) -> f64 {
        self.min_wavelength.max(4.0 * stride as f64)
    }

    fn wavelengths(&self, stride: u32) -> Vec<f64> {
        let limit = 4.0 * self.scene.height().max(self.scene.width()) as f64;
        let mut out = Vec::new();
        let mut l = self.shortest(stride);
        while l <= limit {
            out.push(l);
            l *= 2.0;
        }
        if out.is_empty() {
            out.push(self.shortest(stride));
        }
        out
    }

    pub fn channels(&self, stride: u32) -> usize {
        2 * self.axes * self.wavelengths(stride).len() + 2 * TEXTURE_WAVES
    }

    /// Feature vector of the scene coordinate `q` (already in pixel-like units).
    fn encode(&self, q: &Vector3<f64>, stride: u32, out: &mut [f64]) {
        let waves = self.wavelengths(stride);
        let mut k = 0;
        for l in &waves {
            let omega = TAU / l;
            for a in 0..self.axes {
                let (s, c) = (omega * q[a]).sin_cos();
                out[k] = s;
                out[k + 1] = c;
                k += 2;
            }
        }
        let omega = TAU / (1.5 * self.shortest(stride));
        for (d, phase) in &self.texture {
            let (s, c) = (omega * d.dot(q) + phase).sin_cos();
            out[k] = s;
            out[k + 1] = c;
            k += 2;
        }
        let norm = ((k / 2) as f64).sqrt();
        out.iter_mut().for_each(|v| *v /= norm);
    }
}

impl FeatureProvider for OracleFeatures<'_> {
    fn features(&self, view: usize, stride: u32) -> Result<FeatureGrid> {
        if view >= self.scene.num_views() {
            return Err(invalid(format!("view {view} out of range")));
        }
        let s = stride as usize;
        if s == 0 || !stride.is_power_of_two() || self.scene.height() % s != 0 || self.scene.width() % s != 0 {
            return Err(Error::MissingStride { view, stride });
        }
        let (h, w) = (self.scene.height() / s, self.scene.width() / s);
        let c = self.channels(stride);
        FeatureGrid::from_fn(h, w, c, stride, |y, x, out| {
            let p = GridCoord::new((x * s) as f64, (y * s) as f64);
            if let Some(q) = self.scene.scene_point(view, p) {
                self.encode(&(q * self.scale), stride, out);
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corresponding_pixels_share_features() {
        let scene = SceneOracle::random_planar(3, 32, 32, 4).unwrap();
        let oracle = OracleFeatures::new(&scene, 1);
        let f0 = oracle.features(0, 1).unwrap();
        let f1 = oracle.features(1, 1).unwrap();
        assert_eq!(f0.channels(), oracle.channels(1));
        let h = scene.pair_homography(1, 0).unwrap();
        // a view-1 pixel landing on an integer view-0 pixel is rare; compare
        // against the encoding of the exact transferred point instead
        let p = GridCoord::new(10.0, 12.0);
        let q = crate::scene::apply_homography(&h, p).unwrap();
        let mut want = vec![0.0; f0.channels()];
        oracle.encode(&Vector3::new(q.x, q.y, 0.0), 1, &mut want);
        for (a, b) in f1.pixel(12, 10).iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
        let norm: f64 = f0.pixel(3, 3).iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn provider_is_deterministic_and_checks_strides() {
        let scene = SceneOracle::random_planar(2, 16, 16, 4).unwrap();
        let oracle = OracleFeatures::new(&scene, 9);
        assert_eq!(oracle.features(1, 4).unwrap(), oracle.features(1, 4).unwrap());
        assert!(matches!(oracle.features(0, 32), Err(Error::MissingStride { .. })));
        let mut st = StaticFeatures::new();
        st.insert(0, oracle.features(0, 2).unwrap());
        assert!(st.features(0, 2).is_ok());
        assert!(matches!(st.features(0, 1), Err(Error::MissingStride { view: 0, stride: 1 })));
    }
}
