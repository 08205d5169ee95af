//! Explicit-loop reference implementations shared by the integration tests
//! and the CLI acceptance suite. Everything here works on plain nested
//! vectors so it shares no code with the library kernels it checks.
#![allow(dead_code)]

use mvtrack::attention::AttentionParams;
use mvtrack::grid::{DenseWarpField, FeatureGrid, GridCoord};
use mvtrack::matcher::{DepthwiseConv, MvFuseBlock, MvFuseParams};
use mvtrack::rng::{self, Rng};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

pub type Vec2 = Vec<Vec<f64>>;

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn vec_mat(x: &[f64], m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.ncols()).map(|c| (0..x.len()).map(|r| x[r] * m[(r, c)]).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn query(p: &AttentionParams, nx: f64, ny: f64) -> Vec<f64> {
    let d = p.dim();
    let hidden: Vec<f64> =
        (0..d).map(|k| (p.mlp_b1[k] + nx * p.mlp_w1[(0, k)] + ny * p.mlp_w1[(1, k)]).max(0.0)).collect();
    (0..d).map(|e| p.mlp_b2[e] + (0..d).map(|k| hidden[k] * p.mlp_w2[(k, e)]).sum::<f64>()).collect()
}

fn bias(p: GridCoord, cx: f64, cy: f64, sigma: f64) -> f64 {
    if sigma.is_infinite() {
        return 0.0;
    }
    -((p.x - cx).powi(2) + (p.y - cy).powi(2)) / (2.0 * sigma * sigma)
}

pub fn oracle_sampling(grid: &FeatureGrid, coords: &[GridCoord], p: &AttentionParams) -> Vec2 {
    let (h, w, s, d) = (grid.height(), grid.width(), grid.stride() as f64, p.dim());
    let mut out = Vec::new();
    for &c in coords {
        let q = query(p, c.x / (w as f64 * s), c.y / (h as f64 * s));
        let mut logits = Vec::new();
        let mut values = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let f = grid.pixel(y, x);
                let k = vec_mat(f, &p.w_key);
                logits.push(dot(&q, &k) / (d as f64).sqrt() + bias(c, x as f64 * s, y as f64 * s, p.sigma()));
                values.push(vec_mat(f, &p.w_value));
            }
        }
        let a = softmax(&logits);
        out.push((0..d).map(|e| (0..a.len()).map(|j| a[j] * values[j][e]).sum()).collect());
    }
    out
}

/// `values[v][t]` is track `t` in view `v`; `vis[t][v]` its visibility.
pub fn oracle_transformer(values: &[Vec2], vis: &[Vec<bool>], p: &AttentionParams) -> Vec<Vec2> {
    let (nv, nt, d) = (values.len(), vis.len(), p.dim());
    let mut out = vec![vec![vec![0.0; d]; nt]; nv];
    for t in 0..nt {
        let visible: Vec<usize> = (0..nv).filter(|&v| vis[t][v]).collect();
        for &v in &visible {
            let q = vec_mat(&values[v][t], &p.t_query);
            let logits: Vec<f64> =
                visible.iter().map(|&u| dot(&q, &vec_mat(&values[u][t], &p.t_key)) / (d as f64).sqrt()).collect();
            let a = softmax(&logits);
            let mut o = values[v][t].clone();
            for (k, &u) in visible.iter().enumerate() {
                let val = vec_mat(&vec_mat(&values[u][t], &p.t_value), &p.t_out);
                for e in 0..d {
                    o[e] += a[k] * val[e];
                }
            }
            out[v][t] = o;
        }
    }
    out
}

pub fn oracle_splatting(
    grid: &FeatureGrid,
    feats: &Vec2,
    coords: &[GridCoord],
    vis: &[bool],
    p: &AttentionParams,
) -> Vec<f64> {
    let (h, w, s, d) = (grid.height(), grid.width(), grid.stride() as f64, p.dim());
    let mut out = grid.data().to_vec();
    let visible: Vec<usize> = (0..feats.len()).filter(|&i| vis[i]).collect();
    if visible.is_empty() {
        return out;
    }
    for y in 0..h {
        for x in 0..w {
            let (cx, cy) = (x as f64 * s, y as f64 * s);
            let q = query(p, cx / (w as f64 * s), cy / (h as f64 * s));
            let logits: Vec<f64> = visible
                .iter()
                .map(|&i| {
                    dot(&q, &vec_mat(&feats[i], &p.w_key)) / (d as f64).sqrt() + bias(coords[i], cx, cy, p.sigma())
                })
                .collect();
            let a = softmax(&logits);
            for (k, &i) in visible.iter().enumerate() {
                let val = vec_mat(&vec_mat(&feats[i], &p.w_value), &p.w_out);
                for e in 0..d {
                    out[(y * w + x) * d + e] += a[k] * val[e];
                }
            }
        }
    }
    out
}

pub fn oracle_mvfuse(hidden: &[FeatureGrid], params: &MvFuseParams) -> Vec<Vec<f64>> {
    let (h, w, d) = (hidden[0].height(), hidden[0].width(), hidden[0].channels());
    let nv = hidden.len();
    let mut state: Vec<Vec<f64>> = hidden.iter().map(|g| g.data().to_vec()).collect();
    let px = |s: &Vec<f64>, i: usize| s[i * d..(i + 1) * d].to_vec();
    for b in &params.blocks {
        let mut fused = state.clone();
        for i in 0..h * w {
            for v in 0..nv {
                let q = vec_mat(&px(&state[v], i), &b.w_query);
                let logits: Vec<f64> =
                    (0..nv).map(|u| dot(&q, &vec_mat(&px(&state[u], i), &b.w_key)) / (d as f64).sqrt()).collect();
                let a = softmax(&logits);
                for u in 0..nv {
                    let val = vec_mat(&px(&state[u], i), &b.w_value);
                    for e in 0..d {
                        fused[v][i * d + e] += a[u] * val[e];
                    }
                }
            }
        }
        let k = b.depthwise.kernel() as isize;
        let r = k / 2;
        let mut next = fused.clone();
        for v in 0..nv {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut conv: Vec<f64> = (0..d).map(|c| b.depthwise.bias(c)).collect();
                    for ky in 0..k {
                        for kx in 0..k {
                            let (yy, xx) = (y + ky - r, x + kx - r);
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            for c in 0..d {
                                conv[c] += b.depthwise.weight(c, ky as usize, kx as usize)
                                    * fused[v][(yy as usize * w + xx as usize) * d + c];
                            }
                        }
                    }
                    let hid: Vec<f64> =
                        vec_mat(&conv, &b.mlp_w1).iter().zip(&b.mlp_b1).map(|(a, b)| (a + b).max(0.0)).collect();
                    let o = vec_mat(&hid, &b.mlp_w2);
                    let i = y as usize * w + x as usize;
                    for c in 0..d {
                        next[v][i * d + c] += o[c] + b.mlp_b2[c];
                    }
                }
            }
        }
        state = next;
    }
    state
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn flatten(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).flat_map(|r| (0..m.ncols()).map(move |c| (r, c))).map(|(r, c)| m[(r, c)]).collect()
}

pub fn rows(m: &DMatrix<f64>) -> Vec2 {
    (0..m.nrows()).map(|r| m.row(r).iter().cloned().collect()).collect()
}

pub fn random_grid(r: &mut Rng, h: usize, w: usize, d: usize, stride: u32) -> FeatureGrid {
    FeatureGrid::from_fn(h, w, d, stride, |_, _, out| out.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0)))
        .unwrap()
}

pub fn random_matrix(r: &mut Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
}

/// Random attention instance within the acceptance size limits.
pub struct AttentionCase {
    pub grid: FeatureGrid,
    pub coords: Vec<GridCoord>,
    pub params: AttentionParams,
    pub views: Vec<DMatrix<f64>>,
    pub vis: Vec<Vec<bool>>,
}

pub fn attention_case(seed: u64) -> AttentionCase {
    let mut r = rng::seeded(seed);
    let (h, w) = (r.random_range(1..=8), r.random_range(1..=8));
    let d = r.random_range(1..=6);
    let t = r.random_range(1..=16);
    let nv = r.random_range(1..=5);
    let stride = [1u32, 2, 4][r.random_range(0..3)];
    let sigma = if r.random_bool(0.25) { f64::INFINITY } else { r.random_range(0.5..20.0) };
    let grid = random_grid(&mut r, h, w, d, stride);
    let (bw, bh) = ((w as u32 * stride) as f64, (h as u32 * stride) as f64);
    let coords = (0..t).map(|_| GridCoord::new(r.random_range(0.0..bw), r.random_range(0.0..bh))).collect();
    let mats: [DMatrix<f64>; 7] = std::array::from_fn(|_| random_matrix(&mut r, d, d));
    let params = AttentionParams::from_parts(
        random_matrix(&mut r, 2, d),
        DVector::from_fn(d, |_, _| r.random_range(-1.0..1.0)),
        random_matrix(&mut r, d, d),
        DVector::from_fn(d, |_, _| r.random_range(-1.0..1.0)),
        mats,
        sigma,
    )
    .unwrap();
    let views = (0..nv).map(|_| random_matrix(&mut r, t, d)).collect();
    let vis = (0..t)
        .map(|_| {
            let mut m: Vec<bool> = (0..nv).map(|_| r.random_bool(0.6)).collect();
            let k = r.random_range(0..nv);
            m[k] = true;
            m
        })
        .collect();
    AttentionCase { grid, coords, params, views, vis }
}

pub fn random_fuse_params(r: &mut Rng, d: usize, blocks: usize) -> MvFuseParams {
    let blocks = (0..blocks)
        .map(|_| {
            let mut b = MvFuseBlock::random(d, r).unwrap();
            let k = b.depthwise.kernel();
            let weights = (0..d * k * k).map(|_| r.random_range(-0.3..0.3)).collect();
            let bias = (0..d).map(|_| r.random_range(-0.5..0.5)).collect();
            b.depthwise = DepthwiseConv::new(d, k, weights, bias).unwrap();
            b.mlp_b1.iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
            b.mlp_b2.iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
            b
        })
        .collect();
    MvFuseParams { blocks }
}

/// Greedy NMS by repeated global scans: take the best remaining pixel
/// (raster order on ties) that is far enough from every earlier pick.
pub fn oracle_nms(scores: &[f64], h: usize, w: usize, radius: usize, max: Option<usize>) -> Vec<(usize, usize)> {
    let mut picked: Vec<(usize, usize)> = Vec::new();
    let mut done = vec![false; h * w];
    loop {
        if max.is_some_and(|m| picked.len() >= m) {
            break;
        }
        let mut best: Option<usize> = None;
        for i in 0..h * w {
            if done[i] || !(scores[i] > 0.0) {
                continue;
            }
            if best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(i) = best else { break };
        done[i] = true;
        let (y, x) = (i / w, i % w);
        if picked.iter().all(|&(py, px)| py.abs_diff(y) > radius || px.abs_diff(x) > radius) {
            picked.push((y, x));
        }
    }
    picked
}

/// Per-pixel argmax with lowest-group tie-break, by direct comparison.
pub fn oracle_select(cands: &[(usize, DenseWarpField)]) -> (Vec<GridCoord>, Vec<f64>, Vec<usize>) {
    let n = cands[0].1.len();
    let mut t = Vec::new();
    let mut c = Vec::new();
    let mut g = Vec::new();
    for i in 0..n {
        let best_conf = cands.iter().map(|(_, w)| w.confidence()[i]).fold(f64::NEG_INFINITY, f64::max);
        let (bg, bw) = cands.iter().filter(|(_, w)| w.confidence()[i] == best_conf).min_by_key(|(g, _)| *g).unwrap();
        t.push(bw.targets()[i]);
        c.push(best_conf);
        g.push(*bg);
    }
    (t, c, g)
}

/// Cycle check with an explicitly written bilinear lookup.
pub fn oracle_reciprocity(fwd: &DenseWarpField, bwd: &DenseWarpField, eps: f64) -> Vec<bool> {
    let (h, w) = (bwd.height(), bwd.width());
    let mut keep = Vec::new();
    for y in 0..fwd.height() {
        for x in 0..fwd.width() {
            let t = fwd.target(y, x);
            if t.x < 0.0 || t.y < 0.0 || t.x > (w - 1) as f64 || t.y > (h - 1) as f64 {
                keep.push(false);
                continue;
            }
            let x0 = (t.x.floor() as usize).min(w.saturating_sub(2));
            let y0 = (t.y.floor() as usize).min(h.saturating_sub(2));
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (t.x - x0 as f64, t.y - y0 as f64);
            let (fx, fy) = (if x1 == x0 { 0.0 } else { fx }, if y1 == y0 { 0.0 } else { fy });
            let b = |yy: usize, xx: usize| bwd.target(yy, xx);
            let bx = (1.0 - fy) * ((1.0 - fx) * b(y0, x0).x + fx * b(y0, x1).x)
                + fy * ((1.0 - fx) * b(y1, x0).x + fx * b(y1, x1).x);
            let by = (1.0 - fy) * ((1.0 - fx) * b(y0, x0).y + fx * b(y0, x1).y)
                + fy * ((1.0 - fx) * b(y1, x0).y + fx * b(y1, x1).y);
            keep.push(((bx - x as f64).powi(2) + (by - y as f64).powi(2)).sqrt() <= eps);
        }
    }
    keep
}

pub fn random_warp(r: &mut Rng, h: usize, w: usize, a: usize, b: usize, spread: f64) -> DenseWarpField {
    let targets = (0..h * w)
        .map(|i| {
            GridCoord::new(
                (i % w) as f64 + r.random_range(-spread..spread),
                (i / w) as f64 + r.random_range(-spread..spread),
            )
        })
        .collect();
    // coarse confidence levels make ties common
    let conf = (0..h * w).map(|_| r.random_range(0..5) as f64 / 4.0).collect();
    DenseWarpField::new(h, w, targets, conf, a, b).unwrap()
}
