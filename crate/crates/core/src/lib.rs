//! Multi-view dense matching toolkit.
//!
//! The crate covers the inference-time path of a track-guided multi-view
//! dense matcher and the post-processing that turns its dense warps into
//! structure-from-motion tracks:
//!
//! - [`grid`]: feature grids, dense warp fields and the sampling, warping,
//!   correlation and upsampling primitives everything else is built on.
//! - [`scene`]: synthetic scenes with exact ground-truth correspondences and
//!   a noisy pairwise-matcher simulator.
//! - [`tracks`]: visibility-partitioned k-means sampling of track tokens.
//! - [`attention`]: attentional sampling, track transformer and attentional
//!   splatting used to exchange features between views.
//! - [`matcher`]: coarse global matching and coarse-to-fine refinement with
//!   pixel-aligned multi-view fusion.
//! - [`postprocess`]: match selection across groups, reciprocity filtering,
//!   score maps, NMS and track assembly.
//! - [`groups`]: overlap matrices and two-stage image-group sampling.
//! - [`eval`]: homography and triangulation evaluation protocols.
//!
//! Coordinates are continuous pixel coordinates with pixel centers at
//! integers. A grid at pyramid stride `s` has its pixel `k` located at base
//! pixel `k * s`; warps are stored at the resolution of their level, in the
//! target's pixel units at that level.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod error;
pub mod eval;
pub mod grid;
pub mod groups;
pub mod io;
pub mod matcher;
pub mod postprocess;
pub mod rng;
pub mod scene;
pub mod tracks;

pub use error::{Error, Result};
pub use grid::{CorrelationVolume, DenseWarpField, FeatureGrid, GridCoord};
