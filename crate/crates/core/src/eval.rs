//! Evaluation protocols: homography estimation scored by corner error AUC,
//! and triangulation of tracks scored by accuracy and completeness.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{DenseWarpField, GridCoord};
use crate::rng;
use crate::scene::{apply_homography, PinholeCamera, MAX_CONDITION};

/// Relative singular-value gap below which a linear system is treated as
/// rank deficient.
const RANK_TOLERANCE: f64 = 1e-10;

/// Similarity moving `points` to zero mean and mean distance sqrt(2).
fn normalizer(points: &[GridCoord]) -> Result<Matrix3<f64>> {
    let n = points.len() as f64;
    let (mx, my) = points.iter().fold((0.0, 0.0), |(x, y), p| (x + p.x, y + p.y));
    let (mx, my) = (mx / n, my / n);
    let mean_dist = points.iter().map(|p| (p.x - mx).hypot(p.y - my)).sum::<f64>() / n;
    if !(mean_dist > 0.0) || !mean_dist.is_finite() {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0))
}

fn transform(t: &Matrix3<f64>, p: GridCoord) -> GridCoord {
    let v = t * Vector3::new(p.x, p.y, 1.0);
    GridCoord::new(v.x / v.z, v.y / v.z)
}

/// Scales `h` so its bottom-right entry is 1, or to unit Frobenius norm when
/// that entry vanishes.
pub fn normalize_homography(h: &Matrix3<f64>) -> Matrix3<f64> {
    let h22 = h[(2, 2)];
    if h22.abs() > 1e-12 * h.norm() {
        h / h22
    } else {
        h / h.norm()
    }
}

/// Homography mapping `src[i]` to `dst[i]`, by normalized DLT. Four or more
/// pairs are required; configurations whose design matrix has rank below
/// 8 are rejected.
pub fn dlt_homography(src: &[GridCoord], dst: &[GridCoord]) -> Result<Matrix3<f64>> {
    if src.len() != dst.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} source points but {} destination points",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 4 {
        return Err(Error::InsufficientData(format!("DLT needs 4 correspondences, got {}", src.len())));
    }
    let (ts, td) = (normalizer(src)?, normalizer(dst)?);
    // 2n rows, padded to at least 9 so the SVD exposes the null vector
    let rows = (2 * src.len()).max(9);
    let mut a = DMatrix::zeros(rows, 9);
    for (i, (&p, &q)) in src.iter().zip(dst).enumerate() {
        let (p, q) = (transform(&ts, p), transform(&td, q));
        let (x, y, u, v) = (p.x, p.y, q.x, q.y);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let (largest, eighth) = (svd.singular_values[order[0]], svd.singular_values[order[7]]);
    if !(eighth > RANK_TOLERANCE * largest) {
        return Err(Error::Degenerate("correspondences do not determine a homography".into()));
    }
    let h = v_t.row(order[8]);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td.try_inverse().expect("similarity is invertible");
    Ok(normalize_homography(&(td_inv * hn * ts)))
}

/// Larger of the forward and backward transfer errors of one pair.
pub fn symmetric_transfer_error(h: &Matrix3<f64>, h_inv: &Matrix3<f64>, p: GridCoord, q: GridCoord) -> f64 {
    let fwd = apply_homography(h, p).map_or(f64::INFINITY, |t| t.distance(q));
    let bwd = apply_homography(h_inv, q).map_or(f64::INFINITY, |t| t.distance(p));
    fwd.max(bwd)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacResult {
    pub homography: Matrix3<f64>,
    pub inliers: Vec<bool>,
    pub iterations: usize,
}

impl RansacResult {
    pub fn num_inliers(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn inlier_mask(h: &Matrix3<f64>, src: &[GridCoord], dst: &[GridCoord], threshold: f64) -> Option<Vec<bool>> {
    let h_inv = h.try_inverse()?;
    Some(src.iter().zip(dst).map(|(&p, &q)| symmetric_transfer_error(h, &h_inv, p, q) <= threshold).collect())
}

/// Hypothesize-and-verify homography fit. Minimal samples are four random
/// pairs; a pair is an inlier when its symmetric transfer error is at most
/// `threshold`. The best consensus set is refit with DLT and the mask
/// recomputed under the refit model.
pub fn ransac_homography(
    src: &[GridCoord],
    dst: &[GridCoord],
    threshold: f64,
    max_iters: usize,
    seed: u64,
) -> Result<RansacResult> {
    if src.len() != dst.len() {
        return Err(Error::DimensionMismatch("source and destination lengths differ".into()));
    }
    let n = src.len();
    if n < 4 {
        return Err(Error::InsufficientData(format!("RANSAC needs 4 correspondences, got {n}")));
    }
    if !(threshold > 0.0) {
        return Err(invalid("inlier threshold must be positive"));
    }
    let mut r = rng::seeded(seed);
    let mut best: Option<(usize, Vec<bool>)> = None;
    let mut iterations = 0;
    let mut needed = max_iters;
    while iterations < needed.min(max_iters) {
        iterations += 1;
        let idx = sample(&mut r, n, 4).into_vec();
        let s: Vec<GridCoord> = idx.iter().map(|&i| src[i]).collect();
        let d: Vec<GridCoord> = idx.iter().map(|&i| dst[i]).collect();
        let Ok(h) = dlt_homography(&s, &d) else { continue };
        let Some(mask) = inlier_mask(&h, src, dst, threshold) else { continue };
        let count = mask.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            // adaptive stop for 99.9% confidence of an all-inlier sample
            let w = count as f64 / n as f64;
            let miss = 1.0 - w.powi(4);
            needed = if miss <= 0.0 {
                0
            } else if miss >= 1.0 {
                max_iters
            } else {
                ((1.0f64 - 0.999).ln() / miss.ln()).ceil().min(max_iters as f64) as usize
            };
            best = Some((count, mask));
        }
    }
    let Some((_, mask)) = best.filter(|(c, _)| *c >= 4) else {
        return Err(Error::InsufficientData("no model reached 4 inliers".into()));
    };
    let (s, d): (Vec<GridCoord>, Vec<GridCoord>) =
        mask.iter().zip(src.iter().zip(dst)).filter(|(m, _)| **m).map(|(_, (p, q))| (*p, *q)).unzip();
    let homography = dlt_homography(&s, &d)?;
    let inliers = inlier_mask(&homography, src, dst, threshold)
        .ok_or_else(|| Error::Degenerate("refit homography is singular".into()))?;
    Ok(RansacResult { homography, inliers, iterations })
}

/// The four extreme pixel centers of a `height x width` image.
pub fn image_corners(height: usize, width: usize) -> [GridCoord; 4] {
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    [GridCoord::new(0.0, 0.0), GridCoord::new(w, 0.0), GridCoord::new(w, h), GridCoord::new(0.0, h)]
}

/// Mean distance between the image corners mapped by `estimated` and by
/// `gt`. Corners the estimate sends to infinity count as infinite error.
pub fn corner_error(estimated: &Matrix3<f64>, gt: &Matrix3<f64>, height: usize, width: usize) -> Result<f64> {
    for (name, h) in [("estimated", estimated), ("ground-truth", gt)] {
        let sv = h.singular_values();
        if !(sv.min() > 0.0) || sv.max() / sv.min() > MAX_CONDITION {
            return Err(Error::Degenerate(format!("{name} homography is not invertible")));
        }
    }
    let mut sum = 0.0;
    for c in image_corners(height, width) {
        let g = apply_homography(gt, c).ok_or_else(|| Error::Degenerate("corner maps to infinity".into()))?;
        sum += apply_homography(estimated, c).map_or(f64::INFINITY, |e| e.distance(g));
    }
    Ok(sum / 4.0)
}

/// Area under the cumulative error curve at each threshold: the mean over
/// pairs of `max(0, 1 - err / threshold)`.
pub fn corner_auc(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::InsufficientData("AUC needs at least one pair".into()));
    }
    if thresholds.iter().any(|t| !(*t > 0.0)) {
        return Err(invalid("AUC thresholds must be positive"));
    }
    Ok(thresholds
        .iter()
        .map(|t| errors.iter().map(|e| (1.0 - e / t).max(0.0)).sum::<f64>() / errors.len() as f64)
        .collect())
}

/// Up to `max_matches` correspondences drawn from a warp's confident pixels.
///
/// Pixels with confidence above `min_confidence` are split into ten equal
/// confidence bins; the sample budget is shared evenly between non-empty
/// bins (leftovers flowing to bins with spare pixels) and each bin is
/// sampled uniformly without replacement. Returns `(source, target)` pairs
/// in source raster order.
pub fn balanced_sample(
    warp: &DenseWarpField,
    max_matches: usize,
    min_confidence: f64,
    seed: u64,
) -> Vec<(GridCoord, GridCoord)> {
    const BINS: usize = 10;
    let lo = min_confidence;
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); BINS];
    for (i, &c) in warp.confidence().iter().enumerate() {
        if c > lo {
            let b = (((c - lo) / (1.0 - lo).max(1e-12)) * BINS as f64) as usize;
            bins[b.min(BINS - 1)].push(i);
        }
    }
    let mut take = vec![0usize; BINS];
    let mut left = max_matches;
    loop {
        let open: Vec<usize> = (0..BINS).filter(|&b| take[b] < bins[b].len()).collect();
        if left == 0 || open.is_empty() {
            break;
        }
        let share = (left / open.len()).max(1);
        for b in open {
            let add = share.min(bins[b].len() - take[b]).min(left);
            take[b] += add;
            left -= add;
        }
    }
    let mut r = rng::seeded(seed);
    let mut chosen = Vec::new();
    for (b, pixels) in bins.iter().enumerate() {
        if take[b] == pixels.len() {
            chosen.extend_from_slice(pixels);
        } else {
            chosen.extend(sample(&mut r, pixels.len(), take[b]).into_iter().map(|k| pixels[k]));
        }
    }
    chosen.sort_unstable();
    let w = warp.width();
    chosen.into_iter().map(|i| (GridCoord::new((i % w) as f64, (i / w) as f64), warp.targets()[i])).collect()
}

/// One linear triangulation.
#[derive(Clone, Debug, PartialEq)]
pub struct Triangulation {
    pub point: Vector3<f64>,
    /// The rays do not pin down a unique finite point.
    pub degenerate: bool,
    /// The point lies behind at least one observing camera.
    pub behind: bool,
}

/// Linear multi-view triangulation from `(camera, pixel)` observations.
pub fn triangulate_point(observations: &[(&PinholeCamera, GridCoord)]) -> Result<Triangulation> {
    if observations.len() < 2 {
        return Err(Error::InsufficientData("triangulation needs 2 views".into()));
    }
    let mut a = DMatrix::zeros((2 * observations.len()).max(4), 4);
    for (k, (cam, p)) in observations.iter().enumerate() {
        let pm = cam.projection();
        for (r, (coord, row)) in [(p.x, 0), (p.y, 1)].into_iter().enumerate() {
            let eq = pm.row(2) * coord - pm.row(row);
            // unit rows keep views with different scales comparable
            let eq = eq / eq.norm();
            for c in 0..4 {
                a[(2 * k + r, c)] = eq[c];
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv = |k: usize| svd.singular_values[order[k]];
    let x = v_t.row(order[3]);
    let mut degenerate = !(sv(2) > 1e-9 * sv(0)) || x[3].abs() < 1e-12 * x.norm();
    let point =
        if x[3] != 0.0 { Vector3::new(x[0] / x[3], x[1] / x[3], x[2] / x[3]) } else { Vector3::repeat(f64::INFINITY) };
    if !point.iter().all(|v| v.is_finite()) {
        degenerate = true;
    }
    let behind = !degenerate && observations.iter().any(|(cam, _)| cam.depth_of(&point) <= 0.0);
    Ok(Triangulation { point, degenerate, behind })
}

/// Largest reprojection distance of `point` over `observations`.
pub fn reprojection_error(point: &Vector3<f64>, observations: &[(&PinholeCamera, GridCoord)]) -> f64 {
    observations
        .iter()
        .map(|(cam, p)| cam.project(point).map_or(f64::INFINITY, |(q, _)| q.distance(*p)))
        .fold(0.0, f64::max)
}

/// Track as `(scene view, pixel)` observations.
pub type ViewTrack = Vec<(usize, GridCoord)>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TriangulationReport {
    #[serde(skip)]
    pub points: Vec<Vector3<f64>>,
    pub triangulated: usize,
    pub skipped_short: usize,
    pub degenerate: usize,
    pub behind: usize,
}

/// Triangulates every track with at least two observations; degenerate and
/// behind-camera results are counted and excluded.
pub fn triangulate_tracks(tracks: &[ViewTrack], cameras: &[PinholeCamera]) -> Result<TriangulationReport> {
    let mut report = TriangulationReport::default();
    for t in tracks {
        if t.len() < 2 {
            report.skipped_short += 1;
            continue;
        }
        let obs = t
            .iter()
            .map(|&(v, p)| {
                cameras
                    .get(v)
                    .map(|c| (c, p))
                    .ok_or_else(|| invalid(format!("track references view {v} of {}", cameras.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        let tri = triangulate_point(&obs)?;
        if tri.degenerate {
            report.degenerate += 1;
        } else if tri.behind {
            report.behind += 1;
        } else {
            report.points.push(tri.point);
        }
    }
    report.triangulated = report.points.len();
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCompleteness {
    pub threshold: f64,
    pub accuracy: f64,
    pub completeness: f64,
}

/// Distance from each point of `from` to its nearest neighbour in `to`.
fn nearest_distances(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> Vec<f64> {
    from.iter().map(|p| to.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min).sqrt()).collect()
}

/// Accuracy and completeness at each threshold. The flag is set when there
/// are no triangulated points, in which case accuracy is reported as 0.
pub fn accuracy_completeness(
    points: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    thresholds: &[f64],
) -> Result<(Vec<AccuracyCompleteness>, bool)> {
    if gt.is_empty() {
        return Err(Error::InsufficientData("ground truth has no points".into()));
    }
    let acc = nearest_distances(points, gt);
    let comp = nearest_distances(gt, points);
    let frac = |d: &[f64], t: f64| {
        if d.is_empty() {
            0.0
        } else {
            d.iter().filter(|&&x| x <= t).count() as f64 / d.len() as f64
        }
    };
    let rows = thresholds
        .iter()
        .map(|&t| AccuracyCompleteness { threshold: t, accuracy: frac(&acc, t), completeness: frac(&comp, t) })
        .collect();
    Ok((rows, points.is_empty()))
}

/// Random homography close to the identity up to a translation, for tests
/// and synthetic evaluation.
pub fn random_homography(r: &mut rng::Rng, height: usize, width: usize) -> Matrix3<f64> {
    let (w, h) = (width as f64, height as f64);
    let mut m = Matrix3::identity();
    m[(0, 0)] += r.random_range(-0.2..0.2);
    m[(0, 1)] += r.random_range(-0.2..0.2);
    m[(1, 0)] += r.random_range(-0.2..0.2);
    m[(1, 1)] += r.random_range(-0.2..0.2);
    m[(0, 2)] = r.random_range(-0.1..0.1) * w;
    m[(1, 2)] = r.random_range(-0.1..0.1) * h;
    m[(2, 0)] = r.random_range(-0.2..0.2) / w;
    m[(2, 1)] = r.random_range(-0.2..0.2) / h;
    m
}
