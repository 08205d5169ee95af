//! Track-guided feature exchange: attentional sampling of grid features onto
//! track tokens, self-attention along the view axis of each track, and
//! attentional splatting of track features back onto the grids.
//!
//! All matrices act on row vectors (`y = x * W`). Attention is single-head.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::grid::{FeatureGrid, GridCoord};
use crate::rng;

/// Logit added for masked entries before the softmax.
pub const MASK_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    dim: usize,
    /// Query MLP, first layer (2 x D) and bias.
    pub mlp_w1: DMatrix<f64>,
    pub mlp_b1: DVector<f64>,
    /// Query MLP, second layer (D x D) and bias.
    pub mlp_w2: DMatrix<f64>,
    pub mlp_b2: DVector<f64>,
    pub w_key: DMatrix<f64>,
    pub w_value: DMatrix<f64>,
    /// Output projection of the splatting residual.
    pub w_out: DMatrix<f64>,
    pub t_query: DMatrix<f64>,
    pub t_key: DMatrix<f64>,
    pub t_value: DMatrix<f64>,
    pub t_out: DMatrix<f64>,
    sigma: f64,
}

impl AttentionParams {
    /// Zero query MLP and identity projections.
    pub fn identity(dim: usize, sigma: f64) -> Result<Self> {
        let eye = DMatrix::identity(dim, dim);
        Self::from_parts(
            DMatrix::zeros(2, dim),
            DVector::zeros(dim),
            DMatrix::zeros(dim, dim),
            DVector::zeros(dim),
            [eye.clone(), eye.clone(), eye.clone(), eye.clone(), eye.clone(), eye.clone(), eye],
            sigma,
        )
    }

    /// Gaussian initialisation with fan-in scaling.
    pub fn random(dim: usize, sigma: f64, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("attention dim must be positive"));
        }
        let mut r = rng::seeded(seed);
        let mut draw = |rows: usize, cols: usize| {
            let n = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("positive std");
            DMatrix::from_fn(rows, cols, |_, _| n.sample(&mut r))
        };
        let mlp_w1 = draw(2, dim);
        let mlp_b1 = draw(dim, 1).column(0).into_owned();
        let mlp_w2 = draw(dim, dim);
        let mlp_b2 = draw(dim, 1).column(0).into_owned();
        let mats = [
            draw(dim, dim),
            draw(dim, dim),
            draw(dim, dim),
            draw(dim, dim),
            draw(dim, dim),
            draw(dim, dim),
            draw(dim, dim),
        ];
        Self::from_parts(mlp_w1, mlp_b1, mlp_w2, mlp_b2, mats, sigma)
    }

    /// `projections` is `[key, value, out, t_query, t_key, t_value, t_out]`.
    pub fn from_parts(
        mlp_w1: DMatrix<f64>,
        mlp_b1: DVector<f64>,
        mlp_w2: DMatrix<f64>,
        mlp_b2: DVector<f64>,
        projections: [DMatrix<f64>; 7],
        sigma: f64,
    ) -> Result<Self> {
        let dim = mlp_b1.len();
        if dim == 0 {
            return Err(invalid("attention dim must be positive"));
        }
        if !(sigma > 0.0) {
            return Err(invalid(format!("sigma must be positive, got {sigma}")));
        }
        let shape_ok = mlp_w1.shape() == (2, dim)
            && mlp_w2.shape() == (dim, dim)
            && mlp_b2.len() == dim
            && projections.iter().all(|m| m.shape() == (dim, dim));
        if !shape_ok {
            return Err(Error::DimensionMismatch("attention parameter shapes".into()));
        }
        let finite =
            mlp_w1.iter().chain(mlp_b1.iter()).chain(mlp_w2.iter()).chain(mlp_b2.iter()).all(|v| v.is_finite())
                && projections.iter().all(|m| m.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(invalid("attention parameters must be finite"));
        }
        let [w_key, w_value, w_out, t_query, t_key, t_value, t_out] = projections;
        Ok(Self { dim, mlp_w1, mlp_b1, mlp_w2, mlp_b2, w_key, w_value, w_out, t_query, t_key, t_value, t_out, sigma })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn with_sigma(mut self, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(invalid(format!("sigma must be positive, got {sigma}")));
        }
        self.sigma = sigma;
        Ok(self)
    }

    pub fn with_output_scale(mut self, scale: f64) -> Self {
        self.w_out *= scale;
        self
    }

    pub fn projections(&self) -> [&DMatrix<f64>; 7] {
        [&self.w_key, &self.w_value, &self.w_out, &self.t_query, &self.t_key, &self.t_value, &self.t_out]
    }

    /// Query embedding of a coordinate already normalised to the unit square.
    pub fn query(&self, normalized: (f64, f64)) -> DVector<f64> {
        let mut hidden = self.mlp_b1.clone();
        for d in 0..self.dim {
            hidden[d] += normalized.0 * self.mlp_w1[(0, d)] + normalized.1 * self.mlp_w1[(1, d)];
            hidden[d] = hidden[d].max(0.0);
        }
        self.mlp_w2.tr_mul(&hidden) + &self.mlp_b2
    }
}

/// Maps base-pixel coordinates of a grid to the unit square.
fn normalize(p: GridCoord, grid_h: usize, grid_w: usize, stride: u32) -> (f64, f64) {
    let s = stride as f64;
    (p.x / (grid_w as f64 * s), p.y / (grid_h as f64 * s))
}

/// Entry `(i, j)` is `-|p_i - center(j)|^2 / (2 sigma^2)`; an infinite sigma
/// gives zero bias.
pub fn spatial_bias(
    track_coords: &[GridCoord],
    grid_size: (usize, usize),
    stride: u32,
    sigma: f64,
) -> Result<DMatrix<f64>> {
    if !(sigma > 0.0) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    let (h, w) = grid_size;
    let s = stride as f64;
    let scale = 1.0 / (2.0 * sigma * sigma);
    Ok(DMatrix::from_fn(track_coords.len(), h * w, |i, j| {
        let dx = track_coords[i].x - (j % w) as f64 * s;
        let dy = track_coords[i].y - (j / w) as f64 * s;
        -(dx * dx + dy * dy) * scale
    }))
}

/// In-place softmax over `logits` where `masked[k]` entries get exactly zero
/// weight. Returns false when every entry is masked.
fn masked_softmax(logits: &mut [f64], masked: impl Fn(usize) -> bool) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (k, l) in logits.iter_mut().enumerate() {
        if masked(k) {
            *l = MASK_LOGIT;
        }
        if !masked(k) && *l > max {
            max = *l;
        }
    }
    if max == f64::NEG_INFINITY {
        logits.iter_mut().for_each(|l| *l = 0.0);
        return false;
    }
    let mut total = 0.0;
    for (k, l) in logits.iter_mut().enumerate() {
        *l = if masked(k) { 0.0 } else { (*l - max).exp() };
        total += *l;
    }
    logits.iter_mut().for_each(|l| *l /= total);
    true
}

fn grid_matrix(grid: &FeatureGrid) -> DMatrix<f64> {
    DMatrix::from_row_slice(grid.height() * grid.width(), grid.channels(), grid.data())
}

/// Gathers grid features onto tracks: `softmax(Q K^T / sqrt(D) + B) V` with
/// queries from the coordinate MLP. Returns a `T x D` matrix.
pub fn attentional_sampling(
    grid: &FeatureGrid,
    track_coords: &[GridCoord],
    params: &AttentionParams,
) -> Result<DMatrix<f64>> {
    let d = params.dim();
    if grid.channels() != d {
        return Err(Error::ChannelMismatch { expected: d, got: grid.channels() });
    }
    let (h, w, s) = (grid.height(), grid.width(), grid.stride());
    let f = grid_matrix(grid);
    let keys = &f * &params.w_key;
    let values = &f * &params.w_value;
    let bias = spatial_bias(track_coords, (h, w), s, params.sigma())?;
    let inv = 1.0 / (d as f64).sqrt();
    let mut out = DMatrix::zeros(track_coords.len(), d);
    let mut logits = vec![0.0; h * w];
    for (i, &p) in track_coords.iter().enumerate() {
        let q = params.query(normalize(p, h, w, s));
        for (j, l) in logits.iter_mut().enumerate() {
            *l = keys.row(j).transpose().dot(&q) * inv + bias[(i, j)];
        }
        masked_softmax(&mut logits, |_| false);
        for (j, &a) in logits.iter().enumerate() {
            if a != 0.0 {
                for c in 0..d {
                    out[(i, c)] += a * values[(j, c)];
                }
            }
        }
    }
    Ok(out)
}

/// Per-view track features (`values[v]` is `T x D`) and a `T x V` visibility mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackFeatures {
    values: Vec<DMatrix<f64>>,
    visibility: Vec<Vec<bool>>,
}

impl TrackFeatures {
    pub fn new(values: Vec<DMatrix<f64>>, visibility: Vec<Vec<bool>>) -> Result<Self> {
        let v = values.len();
        if v == 0 {
            return Err(invalid("track features need at least one view"));
        }
        let (t, d) = values[0].shape();
        if values.iter().any(|m| m.shape() != (t, d)) {
            return Err(Error::DimensionMismatch("per-view track features differ in shape".into()));
        }
        if visibility.len() != t || visibility.iter().any(|m| m.len() != v) {
            return Err(Error::DimensionMismatch("visibility must be T x V".into()));
        }
        Ok(Self { values, visibility })
    }

    pub fn num_views(&self) -> usize {
        self.values.len()
    }

    pub fn num_tracks(&self) -> usize {
        self.visibility.len()
    }

    pub fn dim(&self) -> usize {
        self.values[0].ncols()
    }

    pub fn view(&self, v: usize) -> &DMatrix<f64> {
        &self.values[v]
    }

    pub fn visibility(&self) -> &[Vec<bool>] {
        &self.visibility
    }

    pub fn visible(&self, track: usize, view: usize) -> bool {
        self.visibility[track][view]
    }

    /// Visibility column of one view.
    pub fn view_mask(&self, v: usize) -> Vec<bool> {
        self.visibility.iter().map(|m| m[v]).collect()
    }
}

/// Self-attention along the view axis of each track with invisible views
/// masked out. Invisible slots come out as exact zeros.
pub fn track_transformer(feats: &TrackFeatures, params: &AttentionParams) -> Result<TrackFeatures> {
    let d = params.dim();
    if feats.dim() != d {
        return Err(Error::ChannelMismatch { expected: d, got: feats.dim() });
    }
    let (nv, nt) = (feats.num_views(), feats.num_tracks());
    let inv = 1.0 / (d as f64).sqrt();
    let mut out: Vec<DMatrix<f64>> = (0..nv).map(|_| DMatrix::zeros(nt, d)).collect();
    let mut logits = vec![0.0; nv];
    for t in 0..nt {
        let mask = &feats.visibility[t];
        if !mask.iter().any(|&m| m) {
            return Err(invalid(format!("track {t} has no visible view")));
        }
        let rows: Vec<Option<_>> = (0..nv)
            .map(|v| {
                mask[v].then(|| {
                    let z = feats.values[v].row(t);
                    (z * &params.t_query, z * &params.t_key, (z * &params.t_value) * &params.t_out)
                })
            })
            .collect();
        for v in 0..nv {
            let Some((q, _, _)) = &rows[v] else { continue };
            for (u, l) in logits.iter_mut().enumerate() {
                *l = rows[u].as_ref().map_or(0.0, |(_, k, _)| q.dot(k) * inv);
            }
            masked_softmax(&mut logits, |u| !mask[u]);
            let mut row = feats.values[v].row(t).into_owned();
            for (u, &a) in logits.iter().enumerate() {
                if let Some((_, _, val)) = &rows[u] {
                    row += val * a;
                }
            }
            out[v].set_row(t, &row);
        }
    }
    Ok(TrackFeatures { values: out, visibility: feats.visibility.clone() })
}

/// Residual splat of track features onto a grid:
/// `F + softmax(Q' K'^T / sqrt(D) + B^T + M) V' W_out`.
pub fn attentional_splatting(
    grid: &FeatureGrid,
    track_feats: &DMatrix<f64>,
    track_coords: &[GridCoord],
    visibility: &[bool],
    params: &AttentionParams,
) -> Result<FeatureGrid> {
    let d = params.dim();
    if grid.channels() != d {
        return Err(Error::ChannelMismatch { expected: d, got: grid.channels() });
    }
    if track_feats.ncols() != d {
        return Err(Error::ChannelMismatch { expected: d, got: track_feats.ncols() });
    }
    let t = track_feats.nrows();
    if track_coords.len() != t || visibility.len() != t {
        return Err(Error::DimensionMismatch("track features, coords and visibility differ in length".into()));
    }
    if !visibility.iter().any(|&m| m) {
        return Ok(grid.clone());
    }
    let (h, w, s) = (grid.height(), grid.width(), grid.stride());
    let keys = track_feats * &params.w_key;
    let values = (track_feats * &params.w_value) * &params.w_out;
    let bias = spatial_bias(track_coords, (h, w), s, params.sigma())?;
    let inv = 1.0 / (d as f64).sqrt();
    let mut data = grid.data().to_vec();
    let mut logits = vec![0.0; t];
    for j in 0..h * w {
        let q = params.query(normalize(grid.token_center(j), h, w, s));
        for (i, l) in logits.iter_mut().enumerate() {
            *l = if visibility[i] { keys.row(i).transpose().dot(&q) * inv + bias[(i, j)] } else { 0.0 };
        }
        masked_softmax(&mut logits, |i| !visibility[i]);
        let px = &mut data[j * d..(j + 1) * d];
        for (i, &a) in logits.iter().enumerate() {
            if a != 0.0 {
                for (c, o) in px.iter_mut().enumerate() {
                    *o += a * values[(i, c)];
                }
            }
        }
    }
    FeatureGrid::new(h, w, d, s, data)
}
