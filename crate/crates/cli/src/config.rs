//! Run configuration, read from TOML. Every field has a default, so an
//! empty file (or no file) gives the standard setup.

use std::path::Path;

use anyhow::{Context, Result};
use mvtrack::groups::GroupSamplerConfig;
use mvtrack::matcher::{MatcherConfig, DEFAULT_MIN_WAVELENGTH};
use mvtrack::postprocess::PostprocessConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub scene: SceneConfig,
    pub tracks: TracksConfig,
    pub matcher: MatchConfig,
    pub postprocess: PostprocessConfig,
    pub groups: GroupsConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    Planar,
    PointCloud,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub kind: SceneKind,
    pub views: usize,
    /// Side of the full-resolution square image.
    pub base: usize,
    /// Integer downscale applied to `base` for the working resolution.
    pub downscale: usize,
    /// Points sampled for point-cloud scenes.
    pub points: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { kind: SceneKind::Planar, views: 5, base: 672, downscale: 4, points: 4000 }
    }
}

impl SceneConfig {
    pub fn size(&self) -> Result<usize> {
        anyhow::ensure!(self.downscale >= 1 && self.base % self.downscale == 0, "downscale must divide base");
        Ok(self.base / self.downscale)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TracksConfig {
    /// Track tokens per group.
    pub tokens: usize,
    /// Raw pairwise matches drawn before clustering.
    pub raw_matches: usize,
    pub noise_sigma: f64,
    pub outlier_rate: f64,
    pub max_iterations: usize,
}

impl Default for TracksConfig {
    fn default() -> Self {
        Self { tokens: 512, raw_matches: 4096, noise_sigma: 0.5, outlier_rate: 0.0, max_iterations: 50 }
    }
}

/// Where `match` gets its warps from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WarpSource {
    /// The coarse-to-fine matcher on oracle features.
    Oracle,
    /// Exact scene correspondences.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub source: WarpSource,
    /// Shortest feature wavelength in base pixels.
    pub min_wavelength: f64,
    pub network: MatcherConfig,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { source: WarpSource::Oracle, min_wavelength: DEFAULT_MIN_WAVELENGTH, network: MatcherConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupsConfig {
    #[serde(flatten)]
    pub sampler: GroupSamplerConfig,
    /// Stride of the warps used to measure overlap.
    pub overlap_stride: u32,
}

impl Default for GroupsConfig {
    fn default() -> Self {
        Self { sampler: GroupSamplerConfig::default(), overlap_stride: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    Dlt,
    Ransac,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Corner-error AUC thresholds in pixels.
    pub auc_thresholds: Vec<f64>,
    pub estimator: Estimator,
    pub ransac_threshold: f64,
    pub ransac_iterations: usize,
    pub max_matches: usize,
    pub min_confidence: f64,
    /// Accuracy and completeness thresholds in scene units.
    pub distance_thresholds: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            auc_thresholds: vec![1.0, 3.0, 5.0],
            estimator: Estimator::Ransac,
            ransac_threshold: 3.0,
            ransac_iterations: 2000,
            max_matches: 5000,
            min_confidence: 0.3,
            distance_thresholds: vec![0.01, 0.02, 0.05],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_file_matches_the_defaults() {
        let text = include_str!("../../../config/default.toml");
        let parsed: Config = toml::from_str(text).unwrap();
        assert_eq!(parsed, Config::default());
    }

    #[test]
    fn defaults() {
        let c = Config::default();
        assert_eq!(c.tracks.tokens, 512);
        assert_eq!(c.postprocess.eps_p, 3.0);
        assert_eq!(c.postprocess.tau, 0.3);
        assert_eq!(c.postprocess.nms_radius, 2);
        assert_eq!(c.groups.sampler.selection.k, 4);
        assert_eq!(c.scene.base, 672);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Config>("[scene]\nviewz = 3\n").is_err());
        let c: Config = toml::from_str("seed = 9\n[postprocess]\neps_p = 6.0\n").unwrap();
        assert_eq!((c.seed, c.postprocess.eps_p, c.postprocess.tau), (9, 6.0, 0.3));
    }
}
