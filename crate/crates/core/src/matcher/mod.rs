//! Coarse-to-fine multi-view matcher.
//!
//! A group's encoder features first exchange information through track
//! tokens, then each target is matched globally at the coarsest stride and
//! refined level by level. At every level the refiner correlates the source
//! with the warped target around the current estimate, builds a hidden state
//! per target, fuses the hidden states across targets at the configured
//! strides, and applies a residual update to warp and confidence.
//!
//! The residual head is the sum of a correlation readout (integer argmax of
//! the local correlation plus a parabolic sub-pixel fit) and a learned
//! convolutional head, each behind its own gain. Untrained weights are only
//! useful for exercising shapes, so the learned gain defaults to zero.

mod features;
mod layers;

pub use features::{FeatureProvider, OracleFeatures, StaticFeatures, DEFAULT_MIN_WAVELENGTH};
pub use layers::{mvfuse, Conv2d, DepthwiseConv, MvFuseBlock, MvFuseParams, FUSE_KERNEL};

use serde::{Deserialize, Serialize};

use crate::attention::{
    attentional_sampling, attentional_splatting, track_transformer, AttentionParams, TrackFeatures,
};
use crate::error::{invalid, Error, Result};
use crate::grid::{
    bilinear_sample_into, local_correlation, upsample_warp, warp_features, CorrelationVolume, DenseWarpField,
    FeatureGrid, GridCoord,
};
use crate::groups::ImageGroup;
use crate::rng;
use crate::tracks::TrackToken;

/// Anchor centers tiling the target image at one level, in that level's
/// pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    height: usize,
    width: usize,
    centers: Vec<GridCoord>,
}

impl AnchorGrid {
    /// `rows x cols` anchors spread uniformly over a `height x width` image,
    /// with the outer anchors on the border pixel centers.
    pub fn uniform(rows: usize, cols: usize, height: usize, width: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || height == 0 || width == 0 {
            return Err(invalid("anchor grid dimensions must be positive"));
        }
        let place = |k: usize, n: usize, extent: usize| {
            if n == 1 {
                (extent - 1) as f64 / 2.0
            } else {
                k as f64 * (extent - 1) as f64 / (n - 1) as f64
            }
        };
        let centers = (0..rows * cols)
            .map(|i| GridCoord::new(place(i % cols, cols, width), place(i / cols, rows, height)))
            .collect();
        Ok(Self { height: rows, width: cols, centers })
    }

    /// One anchor per texel of `grid`.
    pub fn for_grid(grid: &FeatureGrid) -> Self {
        Self::uniform(grid.height(), grid.width(), grid.height(), grid.width()).expect("grid is nonempty")
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn centers(&self) -> &[GridCoord] {
        &self.centers
    }
}

/// Regression-by-classification: softmax of `beta * <f_src, f_anchor> / sqrt(C)`
/// over the anchors, coordinate = probability-weighted anchor mean,
/// confidence = peak probability.
pub fn global_match(
    src: &FeatureGrid,
    tgt: &FeatureGrid,
    anchors: &AnchorGrid,
    beta: f64,
    source_view: usize,
    target_view: usize,
) -> Result<DenseWarpField> {
    let c = src.channels();
    if tgt.channels() != c {
        return Err(Error::ChannelMismatch { expected: c, got: tgt.channels() });
    }
    let mut anchor_feats = vec![0.0; anchors.centers.len() * c];
    for (i, &a) in anchors.centers.iter().enumerate() {
        bilinear_sample_into(tgt, a, &mut anchor_feats[i * c..(i + 1) * c]);
    }
    let scale = beta / (c as f64).sqrt();
    let n = src.height() * src.width();
    let mut targets = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    let mut logits = vec![0.0; anchors.centers.len()];
    for i in 0..n {
        let f = src.token(i);
        let mut max = f64::NEG_INFINITY;
        for (j, l) in logits.iter_mut().enumerate() {
            let g = &anchor_feats[j * c..(j + 1) * c];
            *l = scale * f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
            max = max.max(*l);
        }
        let mut total = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            total += *l;
        }
        let (mut x, mut y, mut peak) = (0.0, 0.0, 0.0f64);
        for (j, &e) in logits.iter().enumerate() {
            let p = e / total;
            x += p * anchors.centers[j].x;
            y += p * anchors.centers[j].y;
            peak = peak.max(p);
        }
        targets.push(GridCoord::new(x, y));
        confidence.push(peak.clamp(0.0, 1.0));
    }
    DenseWarpField::new(src.height(), src.width(), targets, confidence, source_view, target_view)
}

/// How target features are brought onto the source grid before fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AlignMode {
    /// Sample target features along the forward warp.
    #[default]
    Sample,
    /// Splat target features along a numerical inverse of the forward warp.
    Inverse,
    /// Splat target features along the warp of a reverse-direction pass.
    Reverse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatcherConfig {
    /// Refinement strides, coarse to fine; the first is also the global
    /// matching stride.
    pub strides: Vec<u32>,
    /// Side of the local correlation window.
    pub window: usize,
    /// Inverse temperature of the global matching softmax.
    pub coarse_beta: f64,
    /// Correlation readouts per level (each re-centres the window).
    pub readouts: usize,
    /// Strides whose hidden states pass through fusion.
    pub fuse_strides: Vec<u32>,
    pub fuse_iterations: usize,
    /// Fuse each target on its own (fusion sees a single view).
    pub pairwise: bool,
    pub hidden: usize,
    pub readout_gain: f64,
    pub learned_gain: f64,
    /// Scale of the splatting output projection in the track exchange.
    pub attention_output_scale: f64,
    /// Spatial scale of the track attention bias; `None` means one cell of
    /// the coarsest stride.
    pub sigma: Option<f64>,
    pub align: AlignMode,
    pub seed: u64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            strides: vec![8, 4, 2, 1],
            window: 5,
            coarse_beta: 200.0,
            readouts: 2,
            fuse_strides: vec![8, 1],
            fuse_iterations: 2,
            pairwise: false,
            hidden: 8,
            readout_gain: 1.0,
            learned_gain: 0.0,
            attention_output_scale: 0.0,
            sigma: None,
            align: AlignMode::Sample,
            seed: 0,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.strides.is_empty() {
            return Err(invalid("at least one stride is required"));
        }
        for w in self.strides.windows(2) {
            if w[1] >= w[0] || w[0] % w[1] != 0 {
                return Err(invalid(format!("strides {:?} must be strictly decreasing powers of two", self.strides)));
            }
        }
        if self.strides.iter().any(|s| !s.is_power_of_two()) {
            return Err(invalid(format!("strides {:?} must be powers of two", self.strides)));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(invalid(format!("correlation window {} must be odd", self.window)));
        }
        if self.hidden == 0 {
            return Err(invalid("hidden width must be positive"));
        }
        if !(self.coarse_beta > 0.0) {
            return Err(invalid("coarse_beta must be positive"));
        }
        Ok(())
    }

    pub fn coarse_stride(&self) -> u32 {
        self.strides[0]
    }
}

/// Per-level refinement weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelParams {
    pub stride: u32,
    /// `f`: 3x3 conv then 1x1 conv over `[source, aligned target, correlation]`.
    pub embed: Conv2d,
    pub mix: Conv2d,
    /// `g`: 3x3 conv to `(dx, dy, dp)`.
    pub head: Conv2d,
    pub fuse: Option<MvFuseParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatcherParams {
    pub attention: AttentionParams,
    pub levels: Vec<LevelParams>,
}

impl MatcherParams {
    /// Seeded weights sized for the channel counts `provider` serves for `view`.
    pub fn seeded(config: &MatcherConfig, provider: &dyn FeatureProvider, view: usize) -> Result<Self> {
        config.validate()?;
        let coarse = config.coarse_stride();
        let coarse_channels = provider.features(view, coarse)?.channels();
        let sigma = config.sigma.unwrap_or(coarse as f64);
        let attention = AttentionParams::random(coarse_channels, sigma, config.seed)?
            .with_output_scale(config.attention_output_scale);
        let mut r = rng::substream(config.seed, 1);
        let w2 = config.window * config.window;
        let levels = config
            .strides
            .iter()
            .map(|&s| {
                let c = provider.features(view, s)?.channels();
                let fuse = if config.fuse_strides.contains(&s) && config.fuse_iterations > 0 {
                    Some(MvFuseParams::random(config.hidden, config.fuse_iterations, &mut r)?)
                } else {
                    None
                };
                Ok(LevelParams {
                    stride: s,
                    embed: Conv2d::random(2 * c + w2, config.hidden, 3, &mut r)?,
                    mix: Conv2d::random(config.hidden, config.hidden, 1, &mut r)?,
                    head: Conv2d::random(config.hidden, 3, 3, &mut r)?,
                    fuse,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { attention, levels })
    }
}

/// Warps, confidences and hidden states of all targets at one level.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinerState {
    pub stride: u32,
    pub warps: Vec<DenseWarpField>,
    pub hidden: Vec<FeatureGrid>,
}

/// Sub-pixel offset read from a correlation window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Readout {
    pub dx: f64,
    pub dy: f64,
    /// The peak sits against the image border: along some axis one
    /// neighbour of the best offset is inside the target image and the
    /// other is not, so the true match may lie outside the image.
    pub truncated: bool,
}

/// Integer argmax of a correlation window plus a parabolic sub-pixel fit
/// along each axis. Offsets that would leave the `height x width` target
/// image are ignored, since border clamping makes them copies of the border.
/// Ties prefer the centre, then raster order.
pub fn correlation_readout(
    corr: &CorrelationVolume,
    y: usize,
    x: usize,
    center: GridCoord,
    height: usize,
    width: usize,
) -> Readout {
    let r = corr.radius();
    let valid = |dy: isize, dx: isize| {
        dy.abs() <= r
            && dx.abs() <= r
            && in_bounds(GridCoord::new(center.x + dx as f64, center.y + dy as f64), height, width)
    };
    let mut best = (0isize, 0isize);
    let mut best_score = corr.score(y, x, 0, 0);
    for dy in -r..=r {
        for dx in -r..=r {
            let s = corr.score(y, x, dy, dx);
            if valid(dy, dx) && s > best_score + 1e-12 * best_score.abs() {
                best_score = s;
                best = (dy, dx);
            }
        }
    }
    let (dy, dx) = best;
    let fit = |lo: Option<f64>, mid: f64, hi: Option<f64>| match (lo, hi) {
        (Some(a), Some(b)) => {
            let denom = a - 2.0 * mid + b;
            if denom < 0.0 {
                (0.5 * (a - b) / denom).clamp(-0.5, 0.5)
            } else {
                0.0
            }
        }
        _ => 0.0,
    };
    let at = |yy: isize, xx: isize| valid(yy, xx).then(|| corr.score(y, x, yy, xx));
    let sx = fit(at(dy, dx - 1), best_score, at(dy, dx + 1));
    let sy = fit(at(dy - 1, dx), best_score, at(dy + 1, dx));
    let inside =
        |oy: isize, ox: isize| in_bounds(GridCoord::new(center.x + ox as f64, center.y + oy as f64), height, width);
    let truncated = inside(dy, dx - 1) != inside(dy, dx + 1) || inside(dy - 1, dx) != inside(dy + 1, dx);
    Readout { dx: dx as f64 + sx, dy: dy as f64 + sy, truncated }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa * bb).sqrt()
    }
}

fn in_bounds(p: GridCoord, h: usize, w: usize) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x <= (w - 1) as f64 && p.y <= (h - 1) as f64
}

/// Scatter-then-fill inverse of `warp` on a `height x width` target grid:
/// every target texel hit by a rounded forward target takes the source
/// position of the most confident such pixel (first in raster order on
/// ties); remaining texels copy their nearest filled texel and get zero
/// confidence.
pub fn invert_warp(warp: &DenseWarpField, height: usize, width: usize) -> Result<DenseWarpField> {
    let n = height * width;
    let mut best: Vec<Option<(f64, GridCoord)>> = vec![None; n];
    for y in 0..warp.height() {
        for x in 0..warp.width() {
            let t = warp.target(y, x);
            let c = warp.confidence_at(y, x);
            let (tx, ty) = (t.x.round(), t.y.round());
            if !t.is_finite() || tx < 0.0 || ty < 0.0 || tx >= width as f64 || ty >= height as f64 {
                continue;
            }
            let k = ty as usize * width + tx as usize;
            if best[k].is_none_or(|(bc, _)| c > bc) {
                best[k] = Some((c, GridCoord::new(x as f64, y as f64)));
            }
        }
    }
    // breadth-first fill from the scattered texels, 4-neighbourhood
    let mut source: Vec<Option<GridCoord>> = best.iter().map(|b| b.map(|(_, p)| p)).collect();
    let mut confidence: Vec<f64> = best.iter().map(|b| b.map_or(0.0, |(c, _)| c)).collect();
    let mut frontier: Vec<usize> = (0..n).filter(|&k| source[k].is_some()).collect();
    while !frontier.is_empty() {
        let mut next = Vec::new();
        for &k in &frontier {
            let (y, x) = (k / width, k % width);
            let mut push = |yy: usize, xx: usize| {
                let j = yy * width + xx;
                if source[j].is_none() {
                    source[j] = source[k];
                    next.push(j);
                }
            };
            if y > 0 {
                push(y - 1, x);
            }
            if y + 1 < height {
                push(y + 1, x);
            }
            if x > 0 {
                push(y, x - 1);
            }
            if x + 1 < width {
                push(y, x + 1);
            }
        }
        frontier = next;
    }
    let targets = source.iter().map(|s| s.unwrap_or(GridCoord::MISSING)).collect();
    confidence.iter_mut().for_each(|c| *c = c.clamp(0.0, 1.0));
    DenseWarpField::new(height, width, targets, confidence, warp.target_view(), warp.source_view())
}

/// Forward-splats target features onto the source grid along `inverse`
/// (target pixel -> source position). Collisions average; unreached source
/// texels are zero.
fn splat_features(target: &FeatureGrid, inverse: &DenseWarpField, height: usize, width: usize) -> Result<FeatureGrid> {
    let c = target.channels();
    let mut acc = vec![0.0; height * width * c];
    let mut count = vec![0usize; height * width];
    for y in 0..inverse.height() {
        for x in 0..inverse.width() {
            let s = inverse.target(y, x);
            let (sx, sy) = (s.x.round(), s.y.round());
            if !s.is_finite() || sx < 0.0 || sy < 0.0 || sx >= width as f64 || sy >= height as f64 {
                continue;
            }
            let k = sy as usize * width + sx as usize;
            count[k] += 1;
            for (a, v) in acc[k * c..(k + 1) * c].iter_mut().zip(target.pixel(y, x)) {
                *a += v;
            }
        }
    }
    for (k, &n) in count.iter().enumerate() {
        if n > 1 {
            acc[k * c..(k + 1) * c].iter_mut().for_each(|a| *a /= n as f64);
        }
    }
    FeatureGrid::new(height, width, c, target.stride(), acc)
}

fn concat(grids: &[&FeatureGrid]) -> Result<FeatureGrid> {
    let (h, w) = (grids[0].height(), grids[0].width());
    let total: usize = grids.iter().map(|g| g.channels()).sum();
    let mut data = Vec::with_capacity(h * w * total);
    for i in 0..h * w {
        for g in grids {
            data.extend_from_slice(g.token(i));
        }
    }
    FeatureGrid::new(h, w, total, grids[0].stride(), data)
}

fn correlation_grid(corr: &CorrelationVolume, stride: u32) -> Result<FeatureGrid> {
    let w2 = corr.window() * corr.window();
    FeatureGrid::new(corr.height(), corr.width(), w2, stride, corr.scores().to_vec())
}

/// One refinement level for every target of `group`.
///
/// The incoming warps are upsampled to `stride` when they are coarser, then
/// each target gets a correlation readout, a hidden state from the level's
/// embedding stack, optional fusion across targets, and the residual update
/// `W += readout_gain * readout + learned_gain * head[0..2]`,
/// `p = clamp(p + readout_gain * (cos - p) + learned_gain * head[2])`, where
/// `cos` is the cosine similarity at the new location (zero outside the
/// target image).
pub fn refine_level(
    state: &RefinerState,
    stride: u32,
    group: &ImageGroup,
    provider: &dyn FeatureProvider,
    level: &LevelParams,
    config: &MatcherConfig,
    reverse: Option<&[DenseWarpField]>,
) -> Result<RefinerState> {
    if stride > state.stride || state.stride % stride != 0 {
        return Err(invalid(format!("cannot refine from stride {} to {stride}", state.stride)));
    }
    if state.warps.len() != group.targets().len() {
        return Err(Error::DimensionMismatch("one warp per target is required".into()));
    }
    let factor = (state.stride / stride) as usize;
    let src = provider.features(group.source(), stride)?;
    let (h, w) = (src.height(), src.width());
    let mut warps = Vec::with_capacity(state.warps.len());
    let mut hidden = Vec::with_capacity(state.warps.len());
    let mut target_grids = Vec::with_capacity(state.warps.len());
    for (k, (prev, &view)) in state.warps.iter().zip(group.targets()).enumerate() {
        let warp = if factor > 1 { upsample_warp(prev, factor)? } else { prev.clone() };
        if warp.height() != h || warp.width() != w {
            return Err(Error::DimensionMismatch(format!(
                "warp is {}x{} but the stride-{stride} source grid is {h}x{w}",
                warp.height(),
                warp.width()
            )));
        }
        let tgt = provider.features(view, stride)?;
        if tgt.channels() != src.channels() {
            return Err(Error::ChannelMismatch { expected: src.channels(), got: tgt.channels() });
        }
        let (mut targets, confidence) = warp.clone().into_parts();
        let corr = local_correlation(&src, &tgt, &warp, config.window)?;
        let mut current = corr.clone();
        let mut truncated = vec![false; h * w];
        for pass in 0..config.readouts {
            if pass > 0 {
                let moved = DenseWarpField::new(h, w, targets.clone(), confidence.clone(), warp.source_view(), view)?;
                current = local_correlation(&src, &tgt, &moved, config.window)?;
            }
            for y in 0..h {
                for x in 0..w {
                    let t = &mut targets[y * w + x];
                    let r = correlation_readout(&current, y, x, *t, tgt.height(), tgt.width());
                    t.x += config.readout_gain * r.dx;
                    t.y += config.readout_gain * r.dy;
                    truncated[y * w + x] = r.truncated;
                }
            }
        }
        let read = DenseWarpField::new(h, w, targets, confidence, warp.source_view(), view)?;
        let aligned = match config.align {
            AlignMode::Sample => warp_features(&tgt, &warp)?,
            AlignMode::Inverse => splat_features(&tgt, &invert_warp(&warp, tgt.height(), tgt.width())?, h, w)?,
            AlignMode::Reverse => {
                let rev =
                    reverse.and_then(|r| r.get(k)).ok_or_else(|| invalid("reverse alignment needs reverse warps"))?;
                let rev = if rev.height() == tgt.height() {
                    rev.clone()
                } else {
                    upsample_warp(rev, tgt.height() / rev.height())?
                };
                splat_features(&tgt, &rev, h, w)?
            }
        };
        let input = concat(&[&src, &aligned, &correlation_grid(&corr, stride)?])?;
        let embedded = level.mix.apply(&level.embed.apply(&input, true)?, false)?;
        hidden.push(embedded);
        warps.push((warp, read, truncated));
        target_grids.push(tgt);
    }
    if let Some(fuse) = &level.fuse {
        hidden = if config.pairwise {
            hidden
                .iter()
                .map(|h| mvfuse(std::slice::from_ref(h), fuse).map(|mut v| v.remove(0)))
                .collect::<Result<_>>()?
        } else {
            mvfuse(&hidden, fuse)?
        };
    }
    let mut out = Vec::with_capacity(warps.len());
    for (((base, read, truncated), hid), tgt) in warps.into_iter().zip(&hidden).zip(&target_grids) {
        let head = level.head.apply(hid, false)?;
        let (mut targets, _) = read.into_parts();
        let mut confidence = base.confidence().to_vec();
        let mut sampled = vec![0.0; src.channels()];
        for i in 0..h * w {
            let g = head.token(i);
            let t = &mut targets[i];
            t.x += config.learned_gain * g[0];
            t.y += config.learned_gain * g[1];
            // a peak pressed against the border gives no evidence of a match
            let cos = if !truncated[i] && in_bounds(*t, tgt.height(), tgt.width()) {
                bilinear_sample_into(tgt, *t, &mut sampled);
                cosine(src.token(i), &sampled).max(0.0)
            } else {
                0.0
            };
            let p = confidence[i];
            confidence[i] = (p + config.readout_gain * (cos - p) + config.learned_gain * g[2]).clamp(0.0, 1.0);
        }
        out.push(DenseWarpField::new(h, w, targets, confidence, base.source_view(), base.target_view())?);
    }
    Ok(RefinerState { stride, warps: out, hidden })
}

/// Matcher output for one group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupMatch {
    pub group: ImageGroup,
    /// Global matching result per target, at the coarsest stride.
    pub coarse: Vec<DenseWarpField>,
    /// Refined warps per level (outer) and target (inner).
    pub levels: Vec<RefinerState>,
}

impl GroupMatch {
    /// Final warps at the finest refinement stride.
    pub fn warps(&self) -> &[DenseWarpField] {
        &self.levels.last().expect("at least one level").warps
    }

    pub fn into_warps(mut self) -> Vec<DenseWarpField> {
        self.levels.pop().expect("at least one level").warps
    }
}

/// Track-guided feature exchange on the encoder grids of a group.
pub fn exchange_features(
    grids: &[FeatureGrid],
    tracks: &[TrackToken],
    params: &AttentionParams,
) -> Result<Vec<FeatureGrid>> {
    if tracks.is_empty() {
        return Ok(grids.to_vec());
    }
    let nv = grids.len();
    if tracks.iter().any(|t| t.num_views() != nv) {
        return Err(Error::DimensionMismatch("tracks must cover every view of the group".into()));
    }
    let coords: Vec<Vec<GridCoord>> = (0..nv).map(|v| tracks.iter().map(|t| t.raw_coord(v)).collect()).collect();
    let sampled =
        grids.iter().zip(&coords).map(|(g, c)| attentional_sampling(g, c, params)).collect::<Result<Vec<_>>>()?;
    let visibility = tracks.iter().map(|t| t.visibility().to_vec()).collect();
    let feats = track_transformer(&TrackFeatures::new(sampled, visibility)?, params)?;
    grids
        .iter()
        .enumerate()
        .map(|(v, g)| attentional_splatting(g, feats.view(v), &coords[v], &feats.view_mask(v), params))
        .collect()
}

/// Runs the full matcher on `group`.
pub fn run_group(
    group: &ImageGroup,
    provider: &dyn FeatureProvider,
    tracks: &[TrackToken],
    params: &MatcherParams,
    config: &MatcherConfig,
) -> Result<GroupMatch> {
    config.validate()?;
    if group.targets().is_empty() {
        return Err(invalid("group has no targets"));
    }
    if params.levels.len() != config.strides.len() {
        return Err(Error::DimensionMismatch("one parameter set per stride is required".into()));
    }
    let coarse_stride = config.coarse_stride();
    let encoder = group.views().map(|v| provider.features(v, coarse_stride)).collect::<Result<Vec<_>>>()?;
    let exchanged = exchange_features(&encoder, tracks, &params.attention)?;
    let anchors = AnchorGrid::for_grid(&exchanged[1]);
    let coarse = group
        .targets()
        .iter()
        .enumerate()
        .map(|(k, &v)| global_match(&exchanged[0], &exchanged[k + 1], &anchors, config.coarse_beta, group.source(), v))
        .collect::<Result<Vec<_>>>()?;
    let reverse = if config.align == AlignMode::Reverse {
        Some(reverse_levels(group, provider, params, config, &exchanged)?)
    } else {
        None
    };
    let mut state = RefinerState { stride: coarse_stride, warps: coarse.clone(), hidden: Vec::new() };
    let mut levels = Vec::with_capacity(config.strides.len());
    for (li, (&stride, level)) in config.strides.iter().zip(&params.levels).enumerate() {
        // the reverse warp of the previous (coarser) level
        let rev = reverse.as_ref().map(|r: &Vec<Vec<DenseWarpField>>| r[li].as_slice());
        state = refine_level(&state, stride, group, provider, level, config, rev)?;
        levels.push(state.clone());
    }
    Ok(GroupMatch { group: group.clone(), coarse, levels })
}

/// Reverse-direction warps (target -> source) for every target, computed
/// pairwise without fusion. Entry `li` holds the estimate available before
/// level `li` is refined: the coarse match, then each refined level.
fn reverse_levels(
    group: &ImageGroup,
    provider: &dyn FeatureProvider,
    params: &MatcherParams,
    config: &MatcherConfig,
    exchanged: &[FeatureGrid],
) -> Result<Vec<Vec<DenseWarpField>>> {
    let pair_config = MatcherConfig { align: AlignMode::Sample, pairwise: true, ..config.clone() };
    let anchors = AnchorGrid::for_grid(&exchanged[0]);
    let mut per_level: Vec<Vec<DenseWarpField>> = vec![Vec::new(); config.strides.len()];
    for (k, &v) in group.targets().iter().enumerate() {
        let pair = ImageGroup::new(v, vec![group.source()])?;
        let coarse = global_match(&exchanged[k + 1], &exchanged[0], &anchors, config.coarse_beta, v, group.source())?;
        let mut state = RefinerState { stride: config.coarse_stride(), warps: vec![coarse], hidden: Vec::new() };
        per_level[0].push(state.warps[0].clone());
        for (li, (&stride, level)) in config.strides.iter().zip(&params.levels).enumerate() {
            if li + 1 == config.strides.len() {
                break;
            }
            state = refine_level(&state, stride, &pair, provider, level, &pair_config, None)?;
            per_level[li + 1].push(state.warps[0].clone());
        }
    }
    Ok(per_level)
}
