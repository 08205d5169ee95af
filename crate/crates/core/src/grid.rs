//! Feature grids, dense warp fields and the primitives that act on them.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Continuous pixel coordinate; pixel centers sit at integer values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridCoord {
    pub x: f64,
    pub y: f64,
}

impl GridCoord {
    /// Sentinel stored for views in which a track is not observed.
    pub const MISSING: GridCoord = GridCoord { x: -1.0, y: -1.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: GridCoord) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn scale(self, factor: f64) -> Self {
        Self::new(self.x * factor, self.y * factor)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    /// True when the coordinate lies within `[0, width-1] x [0, height-1]`.
    pub fn inside(self, height: usize, width: usize) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x <= (width - 1) as f64 && self.y <= (height - 1) as f64
    }
}

/// Row-major `height x width x channels` feature map at one pyramid stride.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    stride: u32,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, stride: u32, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(invalid("feature grid dimensions must be positive"));
        }
        if !stride.is_power_of_two() {
            return Err(invalid(format!("stride {stride} is not a power of two")));
        }
        if data.len() != height * width * channels {
            return Err(Error::DimensionMismatch(format!(
                "grid data has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("feature grid contains non-finite values"));
        }
        Ok(Self { height, width, channels, stride, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize, stride: u32) -> Self {
        Self::new(height, width, channels, stride, vec![0.0; height * width * channels])
            .expect("zero grid with valid dimensions")
    }

    /// Builds a grid by evaluating `f(y, x, out)` for every texel.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        stride: u32,
        mut f: impl FnMut(usize, usize, &mut [f64]),
    ) -> Result<Self> {
        let mut data = vec![0.0; height * width * channels];
        for y in 0..height {
            for x in 0..width {
                let off = (y * width + x) * channels;
                f(y, x, &mut data[off..off + channels]);
            }
        }
        Self::new(height, width, channels, stride, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let off = (y * self.width + x) * self.channels;
        &self.data[off..off + self.channels]
    }

    /// Feature vector of the `index`-th texel in raster order.
    pub fn token(&self, index: usize) -> &[f64] {
        let off = index * self.channels;
        &self.data[off..off + self.channels]
    }

    /// Position of texel `(y, x)` in base-resolution pixel units.
    pub fn token_center(&self, index: usize) -> GridCoord {
        let s = self.stride as f64;
        GridCoord::new((index % self.width) as f64 * s, (index / self.width) as f64 * s)
    }

    pub fn same_shape(&self, other: &FeatureGrid) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// Bilinear interpolation of `grid` at `at`, clamping to the border first.
pub fn bilinear_sample(grid: &FeatureGrid, at: GridCoord) -> Vec<f64> {
    let mut out = vec![0.0; grid.channels];
    bilinear_sample_into(grid, at, &mut out);
    out
}

pub fn bilinear_sample_into(grid: &FeatureGrid, at: GridCoord, out: &mut [f64]) {
    let (x0, x1, fx) = clamped_cell(at.x, grid.width);
    let (y0, y1, fy) = clamped_cell(at.y, grid.height);
    let p00 = grid.pixel(y0, x0);
    let p01 = grid.pixel(y0, x1);
    let p10 = grid.pixel(y1, x0);
    let p11 = grid.pixel(y1, x1);
    for c in 0..grid.channels {
        let top = (1.0 - fx) * p00[c] + fx * p01[c];
        let bottom = (1.0 - fx) * p10[c] + fx * p11[c];
        out[c] = (1.0 - fy) * top + fy * bottom;
    }
}

fn clamped_cell(p: f64, n: usize) -> (usize, usize, f64) {
    let p = p.clamp(0.0, (n - 1) as f64);
    let i0 = (p.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, p - i0 as f64)
}

/// Interpolation cell that extends the last cell linearly past the border.
fn extrapolating_cell(p: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let i0 = (p.floor().max(0.0) as usize).min(n - 2);
    (i0, i0 + 1, p - i0 as f64)
}

/// Per-pixel source-to-target correspondences with confidences for one
/// ordered view pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseWarpField {
    height: usize,
    width: usize,
    targets: Vec<GridCoord>,
    confidence: Vec<f64>,
    source_view: usize,
    target_view: usize,
}

impl DenseWarpField {
    pub fn new(
        height: usize,
        width: usize,
        targets: Vec<GridCoord>,
        confidence: Vec<f64>,
        source_view: usize,
        target_view: usize,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("warp dimensions must be positive"));
        }
        let n = height * width;
        if targets.len() != n || confidence.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "warp {height}x{width} needs {n} entries, got {} targets and {} confidences",
                targets.len(),
                confidence.len()
            )));
        }
        if source_view == target_view {
            return Err(invalid("warp source and target views must differ"));
        }
        if let Some(c) = confidence.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return Err(invalid(format!("confidence {c} outside [0, 1]")));
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(invalid("warp contains non-finite coordinates"));
        }
        Ok(Self { height, width, targets, confidence, source_view, target_view })
    }

    /// Identity correspondences with full confidence.
    pub fn identity(height: usize, width: usize, source_view: usize, target_view: usize) -> Self {
        let targets = (0..height * width).map(|i| GridCoord::new((i % width) as f64, (i / width) as f64)).collect();
        Self::new(height, width, targets, vec![1.0; height * width], source_view, target_view)
            .expect("identity warp is valid")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn source_view(&self) -> usize {
        self.source_view
    }

    pub fn target_view(&self) -> usize {
        self.target_view
    }

    pub fn targets(&self) -> &[GridCoord] {
        &self.targets
    }

    pub fn confidence(&self) -> &[f64] {
        &self.confidence
    }

    pub fn target(&self, y: usize, x: usize) -> GridCoord {
        self.targets[y * self.width + x]
    }

    pub fn confidence_at(&self, y: usize, x: usize) -> f64 {
        self.confidence[y * self.width + x]
    }

    pub fn into_parts(self) -> (Vec<GridCoord>, Vec<f64>) {
        (self.targets, self.confidence)
    }

    /// Same correspondences relabelled with different view indices.
    pub fn with_views(mut self, source_view: usize, target_view: usize) -> Result<Self> {
        if source_view == target_view {
            return Err(invalid("warp source and target views must differ"));
        }
        self.source_view = source_view;
        self.target_view = target_view;
        Ok(self)
    }

    /// Backward warp evaluated at a continuous source location, by bilinear
    /// interpolation of the coordinate fields.
    pub fn sample_target(&self, at: GridCoord) -> GridCoord {
        let (x0, x1, fx) = clamped_cell(at.x, self.width);
        let (y0, y1, fy) = clamped_cell(at.y, self.height);
        let t = |y: usize, x: usize| self.targets[y * self.width + x];
        let (a, b, c, d) = (t(y0, x0), t(y0, x1), t(y1, x0), t(y1, x1));
        let lerp =
            |p: f64, q: f64, r: f64, s: f64| (1.0 - fy) * ((1.0 - fx) * p + fx * q) + fy * ((1.0 - fx) * r + fx * s);
        GridCoord::new(lerp(a.x, b.x, c.x, d.x), lerp(a.y, b.y, c.y, d.y))
    }
}

/// Resamples `target` along `warp`: output texel `u` is the target feature at
/// `warp.targets[u]`. Views share their resolution, so a warp that does not
/// match the target grid's size belongs to a different stride.
pub fn warp_features(target: &FeatureGrid, warp: &DenseWarpField) -> Result<FeatureGrid> {
    if warp.height != target.height || warp.width != target.width {
        return Err(Error::DimensionMismatch(format!(
            "warp is {}x{} but the stride-{} grid is {}x{}",
            warp.height, warp.width, target.stride, target.height, target.width
        )));
    }
    let c = target.channels;
    let mut data = vec![0.0; warp.len() * c];
    for (i, &t) in warp.targets.iter().enumerate() {
        bilinear_sample_into(target, t, &mut data[i * c..(i + 1) * c]);
    }
    FeatureGrid::new(warp.height, warp.width, c, target.stride, data)
}

/// Per-pixel similarity scores over a square window of integer offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationVolume {
    height: usize,
    width: usize,
    window: usize,
    scores: Vec<f64>,
}

impl CorrelationVolume {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn radius(&self) -> isize {
        (self.window / 2) as isize
    }

    /// Scores of pixel `(y, x)`, row-major over offsets `dy` then `dx`, each
    /// running from `-radius` to `radius`.
    pub fn scores_at(&self, y: usize, x: usize) -> &[f64] {
        let w2 = self.window * self.window;
        let off = (y * self.width + x) * w2;
        &self.scores[off..off + w2]
    }

    pub fn score(&self, y: usize, x: usize, dy: isize, dx: isize) -> f64 {
        let r = self.radius();
        let idx = ((dy + r) as usize) * self.window + (dx + r) as usize;
        self.scores_at(y, x)[idx]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }
}

/// Local correlation around the current warp estimate, scaled by
/// `1/sqrt(channels)`.
pub fn local_correlation(
    source: &FeatureGrid,
    target: &FeatureGrid,
    warp: &DenseWarpField,
    window: usize,
) -> Result<CorrelationVolume> {
    if source.channels != target.channels {
        return Err(Error::ChannelMismatch { expected: source.channels, got: target.channels });
    }
    if window == 0 || window % 2 == 0 {
        return Err(invalid(format!("correlation window {window} must be odd")));
    }
    if warp.height != source.height || warp.width != source.width {
        return Err(Error::DimensionMismatch(format!(
            "warp is {}x{} but source grid is {}x{}",
            warp.height, warp.width, source.height, source.width
        )));
    }
    let c = source.channels;
    let r = (window / 2) as isize;
    let scale = 1.0 / (c as f64).sqrt();
    let mut scores = Vec::with_capacity(warp.len() * window * window);
    let mut sampled = vec![0.0; c];
    for (i, &t) in warp.targets.iter().enumerate() {
        let f = source.token(i);
        for dy in -r..=r {
            for dx in -r..=r {
                let at = GridCoord::new(t.x + dx as f64, t.y + dy as f64);
                bilinear_sample_into(target, at, &mut sampled);
                let dot: f64 = f.iter().zip(&sampled).map(|(a, b)| a * b).sum();
                scores.push(dot * scale);
            }
        }
    }
    Ok(CorrelationVolume { height: source.height, width: source.width, window, scores })
}

/// Upsamples a warp by `factor` (a power of two, at least 2).
///
/// Fine pixel `X` sits at coarse position `X / factor`. Target coordinates
/// are interpolated bilinearly (extending the border cells linearly, so
/// affine warps are reproduced exactly) and multiplied by `factor`.
/// Confidences are interpolated with border clamping and clipped to [0, 1].
pub fn upsample_warp(warp: &DenseWarpField, factor: usize) -> Result<DenseWarpField> {
    if factor < 2 || !factor.is_power_of_two() {
        return Err(invalid(format!("upsampling factor {factor} must be a power of two >= 2")));
    }
    let (h, w) = (warp.height, warp.width);
    let (fh, fw) = (h * factor, w * factor);
    let f = factor as f64;
    let mut targets = Vec::with_capacity(fh * fw);
    let mut confidence = Vec::with_capacity(fh * fw);
    for y in 0..fh {
        let py = y as f64 / f;
        let (ey0, ey1, ety) = extrapolating_cell(py, h);
        let (cy0, cy1, cty) = clamped_cell(py, h);
        for x in 0..fw {
            let px = x as f64 / f;
            let (ex0, ex1, etx) = extrapolating_cell(px, w);
            let t = |yy: usize, xx: usize| warp.targets[yy * w + xx];
            let (a, b, c, d) = (t(ey0, ex0), t(ey0, ex1), t(ey1, ex0), t(ey1, ex1));
            let lerp = |p: f64, q: f64, r: f64, s: f64| {
                (1.0 - ety) * ((1.0 - etx) * p + etx * q) + ety * ((1.0 - etx) * r + etx * s)
            };
            targets.push(GridCoord::new(lerp(a.x, b.x, c.x, d.x) * f, lerp(a.y, b.y, c.y, d.y) * f));

            let (cx0, cx1, ctx) = clamped_cell(px, w);
            let p = |yy: usize, xx: usize| warp.confidence[yy * w + xx];
            let conf = (1.0 - cty) * ((1.0 - ctx) * p(cy0, cx0) + ctx * p(cy0, cx1))
                + cty * ((1.0 - ctx) * p(cy1, cx0) + ctx * p(cy1, cx1));
            confidence.push(conf.clamp(0.0, 1.0));
        }
    }
    DenseWarpField::new(fh, fw, targets, confidence, warp.source_view, warp.target_view)
}
