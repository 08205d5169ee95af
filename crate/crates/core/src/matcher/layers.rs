//! Small convolutional and attention layers used by the refiner.

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::grid::FeatureGrid;
use crate::rng::Rng;

fn gaussian(r: &mut Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let d = Normal::new(0.0, 1.0 / (fan_in.max(1) as f64).sqrt()).expect("positive std");
    (0..n).map(|_| d.sample(r)).collect()
}

/// Dense 2D convolution with zero padding and "same" output size.
/// Weights are laid out `[out][in][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(invalid("convolution channels must be positive"));
        }
        if kernel % 2 == 0 {
            return Err(invalid(format!("kernel size {kernel} must be odd")));
        }
        if weights.len() != out_channels * in_channels * kernel * kernel || bias.len() != out_channels {
            return Err(Error::DimensionMismatch("convolution weight shapes".into()));
        }
        Ok(Self { in_channels, out_channels, kernel, weights, bias })
    }

    pub fn random(in_channels: usize, out_channels: usize, kernel: usize, r: &mut Rng) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weights = gaussian(r, out_channels * fan_in, fan_in);
        Self::new(in_channels, out_channels, kernel, weights, vec![0.0; out_channels])
    }

    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        Self::new(
            in_channels,
            out_channels,
            kernel,
            vec![0.0; out_channels * in_channels * kernel * kernel],
            vec![0.0; out_channels],
        )
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn apply(&self, input: &FeatureGrid, relu: bool) -> Result<FeatureGrid> {
        if input.channels() != self.in_channels {
            return Err(Error::ChannelMismatch { expected: self.in_channels, got: input.channels() });
        }
        let (h, w) = (input.height(), input.width());
        let (ci, co, k) = (self.in_channels, self.out_channels, self.kernel);
        let r = (k / 2) as isize;
        let mut out = vec![0.0; h * w * co];
        for y in 0..h {
            for x in 0..w {
                let o = &mut out[(y * w + x) * co..(y * w + x + 1) * co];
                o.copy_from_slice(&self.bias);
                for ky in 0..k {
                    let yy = y as isize + ky as isize - r;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let xx = x as isize + kx as isize - r;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let px = input.pixel(yy as usize, xx as usize);
                        for (oc, acc) in o.iter_mut().enumerate() {
                            let base = ((oc * ci) * k + ky) * k + kx;
                            let mut s = 0.0;
                            for (ic, v) in px.iter().enumerate() {
                                s += self.weights[base + ic * k * k] * v;
                            }
                            *acc += s;
                        }
                    }
                }
                if relu {
                    o.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
        }
        FeatureGrid::new(h, w, co, input.stride(), out)
    }
}

/// Per-channel 2D convolution with zero padding; weights `[channel][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseConv {
    channels: usize,
    kernel: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl DepthwiseConv {
    pub fn new(channels: usize, kernel: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(invalid(format!("kernel size {kernel} must be odd")));
        }
        if weights.len() != channels * kernel * kernel || bias.len() != channels {
            return Err(Error::DimensionMismatch("depthwise weight shapes".into()));
        }
        Ok(Self { channels, kernel, weights, bias })
    }

    pub fn random(channels: usize, kernel: usize, r: &mut Rng) -> Result<Self> {
        let weights = gaussian(r, channels * kernel * kernel, kernel * kernel);
        Self::new(channels, kernel, weights, vec![0.0; channels])
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn weight(&self, c: usize, ky: usize, kx: usize) -> f64 {
        self.weights[(c * self.kernel + ky) * self.kernel + kx]
    }

    pub fn bias(&self, c: usize) -> f64 {
        self.bias[c]
    }

    pub fn apply(&self, input: &FeatureGrid) -> Result<FeatureGrid> {
        let c = self.channels;
        if input.channels() != c {
            return Err(Error::ChannelMismatch { expected: c, got: input.channels() });
        }
        let (h, w, k) = (input.height(), input.width(), self.kernel);
        let r = (k / 2) as isize;
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                let o = &mut out[(y * w + x) * c..(y * w + x + 1) * c];
                o.copy_from_slice(&self.bias);
                for ky in 0..k {
                    let yy = y as isize + ky as isize - r;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let xx = x as isize + kx as isize - r;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let px = input.pixel(yy as usize, xx as usize);
                        for ch in 0..c {
                            o[ch] += self.weights[(ch * k + ky) * k + kx] * px[ch];
                        }
                    }
                }
            }
        }
        FeatureGrid::new(h, w, c, input.stride(), out)
    }
}

/// One fusion block: per-pixel attention across view slots followed by a
/// depthwise 7x7 convolution and a two-layer channel MLP, both residual.
#[derive(Clone, Debug, PartialEq)]
pub struct MvFuseBlock {
    pub w_query: DMatrix<f64>,
    pub w_key: DMatrix<f64>,
    pub w_value: DMatrix<f64>,
    pub depthwise: DepthwiseConv,
    /// Channel MLP, `D x 2D` then `2D x D`.
    pub mlp_w1: DMatrix<f64>,
    pub mlp_b1: Vec<f64>,
    pub mlp_w2: DMatrix<f64>,
    pub mlp_b2: Vec<f64>,
}

pub const FUSE_KERNEL: usize = 7;

impl MvFuseBlock {
    pub fn random(dim: usize, r: &mut Rng) -> Result<Self> {
        let mut mat = |rows: usize, cols: usize| DMatrix::from_vec(rows, cols, gaussian(r, rows * cols, rows));
        let w_query = mat(dim, dim);
        let w_key = mat(dim, dim);
        let w_value = mat(dim, dim);
        let mlp_w1 = mat(dim, 2 * dim);
        let mlp_w2 = mat(2 * dim, dim);
        Ok(Self {
            w_query,
            w_key,
            w_value,
            depthwise: DepthwiseConv::random(dim, FUSE_KERNEL, r)?,
            mlp_w1,
            mlp_b1: vec![0.0; 2 * dim],
            mlp_w2,
            mlp_b2: vec![0.0; dim],
        })
    }

    pub fn dim(&self) -> usize {
        self.w_query.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MvFuseParams {
    pub blocks: Vec<MvFuseBlock>,
}

impl MvFuseParams {
    pub fn random(dim: usize, iterations: usize, r: &mut Rng) -> Result<Self> {
        let blocks = (0..iterations).map(|_| MvFuseBlock::random(dim, r)).collect::<Result<_>>()?;
        Ok(Self { blocks })
    }
}

/// Pixel-aligned multi-view fusion over `hidden` (one grid per view slot,
/// all on the source pixel grid). Each block applies
/// `h' = h + Attn(h)` with a softmax over the view slots at every pixel, then
/// `h'' = h' + MLP(depthwise(h'))` per view.
pub fn mvfuse(hidden: &[FeatureGrid], params: &MvFuseParams) -> Result<Vec<FeatureGrid>> {
    let Some(first) = hidden.first() else {
        return Err(invalid("mvfuse needs at least one view"));
    };
    if hidden.iter().any(|g| !g.same_shape(first)) {
        return Err(Error::DimensionMismatch("mvfuse grids differ in size".into()));
    }
    let mut state: Vec<FeatureGrid> = hidden.to_vec();
    for block in &params.blocks {
        if block.dim() != first.channels() {
            return Err(Error::ChannelMismatch { expected: block.dim(), got: first.channels() });
        }
        state = fuse_views(&state, block)?;
        state = state.iter().map(|g| mix_spatial(g, block)).collect::<Result<_>>()?;
    }
    Ok(state)
}

fn fuse_views(hidden: &[FeatureGrid], block: &MvFuseBlock) -> Result<Vec<FeatureGrid>> {
    let nv = hidden.len();
    let (h, w, d) = (hidden[0].height(), hidden[0].width(), hidden[0].channels());
    let inv = 1.0 / (d as f64).sqrt();
    let project = |g: &FeatureGrid, m: &DMatrix<f64>| DMatrix::from_row_slice(h * w, d, g.data()) * m;
    let qs: Vec<_> = hidden.iter().map(|g| project(g, &block.w_query)).collect();
    let ks: Vec<_> = hidden.iter().map(|g| project(g, &block.w_key)).collect();
    let vs: Vec<_> = hidden.iter().map(|g| project(g, &block.w_value)).collect();
    let mut out: Vec<Vec<f64>> = hidden.iter().map(|g| g.data().to_vec()).collect();
    let mut logits = vec![0.0; nv];
    for p in 0..h * w {
        for v in 0..nv {
            let mut max = f64::NEG_INFINITY;
            for (u, l) in logits.iter_mut().enumerate() {
                *l = qs[v].row(p).dot(&ks[u].row(p)) * inv;
                max = max.max(*l);
            }
            let mut total = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                total += *l;
            }
            let o = &mut out[v][p * d..(p + 1) * d];
            for (u, &a) in logits.iter().enumerate() {
                let a = a / total;
                for (c, oc) in o.iter_mut().enumerate() {
                    *oc += a * vs[u][(p, c)];
                }
            }
        }
    }
    out.into_iter().map(|data| FeatureGrid::new(h, w, d, hidden[0].stride(), data)).collect()
}

fn mix_spatial(g: &FeatureGrid, block: &MvFuseBlock) -> Result<FeatureGrid> {
    let d = g.channels();
    let conv = block.depthwise.apply(g)?;
    let mut data = g.data().to_vec();
    let mut hidden = vec![0.0; 2 * d];
    for (p, px) in conv.data().chunks_exact(d).enumerate() {
        for (j, hj) in hidden.iter_mut().enumerate() {
            let mut s = block.mlp_b1[j];
            for (c, v) in px.iter().enumerate() {
                s += v * block.mlp_w1[(c, j)];
            }
            *hj = s.max(0.0);
        }
        for c in 0..d {
            let mut s = block.mlp_b2[c];
            for (j, hj) in hidden.iter().enumerate() {
                s += hj * block.mlp_w2[(j, c)];
            }
            data[p * d + c] += s;
        }
    }
    FeatureGrid::new(g.height(), g.width(), d, g.stride(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use rand::Rng as _;

    fn random_grid(h: usize, w: usize, d: usize, r: &mut Rng) -> FeatureGrid {
        FeatureGrid::from_fn(h, w, d, 1, |_, _, out| out.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0)))
            .unwrap()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut r = rng::seeded(1);
        let conv = Conv2d::random(2, 3, 3, &mut r).unwrap();
        let g = random_grid(4, 5, 2, &mut r);
        let out = conv.apply(&g, false).unwrap();
        for y in 0..4isize {
            for x in 0..5isize {
                for oc in 0..3 {
                    let mut want = 0.0;
                    for ic in 0..2 {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (yy, xx) = (y + ky - 1, x + kx - 1);
                                if (0..4).contains(&yy) && (0..5).contains(&xx) {
                                    want += conv.weights[((oc * 2 + ic) * 3 + ky as usize) * 3 + kx as usize]
                                        * g.pixel(yy as usize, xx as usize)[ic];
                                }
                            }
                        }
                    }
                    assert_abs_diff_eq!(out.pixel(y as usize, x as usize)[oc], want, epsilon = 1e-12);
                }
            }
        }
        assert!(conv.apply(&random_grid(2, 2, 3, &mut r), false).is_err());
    }

    #[test]
    fn depthwise_identity_kernel() {
        let mut w = vec![0.0; 2 * 49];
        w[24] = 1.0;
        w[49 + 24] = 1.0;
        let conv = DepthwiseConv::new(2, 7, w, vec![0.0, 0.0]).unwrap();
        let mut r = rng::seeded(2);
        let g = random_grid(3, 4, 2, &mut r);
        assert_eq!(conv.apply(&g).unwrap(), g);
    }

    #[test]
    fn identical_views_attend_to_shared_value() {
        let mut r = rng::seeded(3);
        let block = MvFuseBlock::random(3, &mut r).unwrap();
        let g = random_grid(2, 2, 3, &mut r);
        let out = fuse_views(&[g.clone(), g.clone(), g.clone()], &block).unwrap();
        for p in 0..4 {
            let v = DMatrix::from_row_slice(1, 3, g.token(p)) * &block.w_value;
            for o in &out {
                for c in 0..3 {
                    assert_abs_diff_eq!(o.token(p)[c], g.token(p)[c] + v[(0, c)], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn mvfuse_checks_shapes() {
        let mut r = rng::seeded(4);
        let p = MvFuseParams::random(2, 1, &mut r).unwrap();
        let a = random_grid(2, 2, 2, &mut r);
        let b = random_grid(2, 3, 2, &mut r);
        assert!(matches!(mvfuse(&[a.clone(), b], &p), Err(Error::DimensionMismatch(_))));
        assert!(mvfuse(&[], &p).is_err());
        assert!(matches!(mvfuse(&[random_grid(2, 2, 3, &mut r)], &p), Err(Error::ChannelMismatch { .. })));
        assert_eq!(mvfuse(&[a.clone()], &MvFuseParams { blocks: vec![] }).unwrap(), vec![a]);
    }
}
