//! Track tokens and their construction from raw pairwise matches.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::error::{invalid, Result};
use crate::grid::GridCoord;
use crate::rng;
use crate::scene::MatchSample;

/// Multi-view track: stacked per-view coordinates plus a visibility mask.
/// Slot 0 is the source view and is always visible.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackToken {
    coords: Vec<f64>,
    visibility: Vec<bool>,
}

impl TrackToken {
    pub fn new(coords: Vec<f64>, visibility: Vec<bool>) -> Result<Self> {
        let v = visibility.len();
        if v < 2 || coords.len() != 2 * v {
            return Err(invalid(format!(
                "track needs 2V coordinates for V >= 2 views, got {} for V = {v}",
                coords.len()
            )));
        }
        if !visibility[0] {
            return Err(invalid("track must be visible in its source view"));
        }
        if !visibility[1..].iter().any(|&m| m) {
            return Err(invalid("track must be visible in at least one target view"));
        }
        for (slot, &m) in visibility.iter().enumerate() {
            let (x, y) = (coords[2 * slot], coords[2 * slot + 1]);
            let sentinel = x == GridCoord::MISSING.x && y == GridCoord::MISSING.y;
            if m == sentinel {
                return Err(invalid(format!("view {slot}: visibility {m} inconsistent with coordinate ({x}, {y})")));
            }
            if !(x.is_finite() && y.is_finite()) {
                return Err(invalid("track coordinates must be finite"));
            }
        }
        Ok(Self { coords, visibility })
    }

    /// Builds a token from per-slot observations; `None` marks a missing view.
    pub fn from_observations(obs: &[Option<GridCoord>]) -> Result<Self> {
        let mut coords = Vec::with_capacity(obs.len() * 2);
        let mut visibility = Vec::with_capacity(obs.len());
        for o in obs {
            let c = o.unwrap_or(GridCoord::MISSING);
            coords.extend([c.x, c.y]);
            visibility.push(o.is_some());
        }
        Self::new(coords, visibility)
    }

    pub fn num_views(&self) -> usize {
        self.visibility.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn visibility(&self) -> &[bool] {
        &self.visibility
    }

    pub fn is_visible(&self, slot: usize) -> bool {
        self.visibility[slot]
    }

    pub fn coord(&self, slot: usize) -> Option<GridCoord> {
        self.visibility[slot].then(|| GridCoord::new(self.coords[2 * slot], self.coords[2 * slot + 1]))
    }

    /// Stored coordinate of `slot`, the sentinel when missing.
    pub fn raw_coord(&self, slot: usize) -> GridCoord {
        GridCoord::new(self.coords[2 * slot], self.coords[2 * slot + 1])
    }

    pub fn source(&self) -> GridCoord {
        self.raw_coord(0)
    }

    /// Number of visible views, source included.
    pub fn length(&self) -> usize {
        self.visibility.iter().filter(|&&m| m).count()
    }
}

/// Raw tracks sharing one visibility mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisibilityPartition {
    pub mask: Vec<bool>,
    /// Indices into the raw match list, ascending.
    pub members: Vec<usize>,
}

/// Groups raw matches by identical visibility; partitions are ordered
/// lexicographically by mask (`false < true`).
pub fn partition_by_visibility(raw: &[MatchSample]) -> Result<Vec<VisibilityPartition>> {
    if raw.is_empty() {
        return Err(invalid("cannot partition an empty match list"));
    }
    let mut by_mask: BTreeMap<Vec<bool>, Vec<usize>> = BTreeMap::new();
    for (i, s) in raw.iter().enumerate() {
        by_mask.entry(s.visibility()).or_default().push(i);
    }
    Ok(by_mask.into_iter().map(|(mask, members)| VisibilityPartition { mask, members }).collect())
}

/// Per-partition cluster counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterAllocation {
    pub counts: Vec<usize>,
    /// Set when fewer than `T` clusters could be allocated because the
    /// partitions hold fewer raw tracks than requested.
    pub short: bool,
}

/// Splits `total` clusters across partitions in proportion to their sizes
/// using largest-remainder rounding. Counts never exceed a partition's
/// size; surplus from capped partitions is redistributed. Remainder ties go
/// to the larger partition, then to the earlier mask.
pub fn allocate_clusters(partitions: &[VisibilityPartition], total: usize) -> Result<ClusterAllocation> {
    if total == 0 {
        return Err(invalid("track count T must be at least 1"));
    }
    let sizes: Vec<usize> = partitions.iter().map(|p| p.members.len()).collect();
    let available: usize = sizes.iter().sum();
    let target = total.min(available);
    let mut counts = vec![0usize; sizes.len()];
    let mut open: Vec<usize> = (0..sizes.len()).filter(|&i| sizes[i] > 0).collect();
    let mut remaining = target;
    while remaining > 0 && !open.is_empty() {
        let weight: usize = open.iter().map(|&i| sizes[i] - counts[i]).sum();
        let shares: Vec<(usize, f64)> =
            open.iter().map(|&i| (i, remaining as f64 * (sizes[i] - counts[i]) as f64 / weight as f64)).collect();
        let mut assigned = 0;
        for &(i, q) in &shares {
            let add = (q.floor() as usize).min(sizes[i] - counts[i]);
            counts[i] += add;
            assigned += add;
        }
        let mut order: Vec<(usize, f64)> =
            shares.iter().map(|&(i, q)| (i, q - q.floor())).filter(|&(i, _)| counts[i] < sizes[i]).collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(sizes[b.0].cmp(&sizes[a.0])).then(a.0.cmp(&b.0)));
        let mut left = remaining - assigned;
        for &(i, _) in &order {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        remaining = left;
        open.retain(|&i| counts[i] < sizes[i]);
    }
    Ok(ClusterAllocation { counts, short: target < total })
}

/// Options for [`sample_tracks`].
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Number of track tokens `T`.
    pub tokens: usize,
    pub seed: u64,
    pub max_iterations: usize,
    /// Lloyd iterations stop once no centroid moves further than this (px).
    pub tolerance: f64,
    /// When set, coordinates are divided by `(width, height)` before
    /// clustering; otherwise raw base-resolution pixels are used.
    pub normalize: Option<(f64, f64)>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { tokens: DEFAULT_TOKENS, seed: 0, max_iterations: 50, tolerance: 1e-4, normalize: None }
    }
}

pub const DEFAULT_TOKENS: usize = 512;

/// Clustering-based track sampling. Each visibility partition is clustered
/// with k-means (k from [`allocate_clusters`]) over its visible
/// coordinates, and the raw match closest to each centroid becomes a token.
/// Output order is partition order, then cluster index.
pub fn sample_tracks(raw: &[MatchSample], config: &SamplerConfig) -> Result<Vec<TrackToken>> {
    let partitions = partition_by_visibility(raw)?;
    let alloc = allocate_clusters(&partitions, config.tokens)?;
    let mut out = Vec::with_capacity(alloc.counts.iter().sum());
    for (pi, (part, &k)) in partitions.iter().zip(&alloc.counts).enumerate() {
        if k == 0 {
            continue;
        }
        let points: Vec<Vec<f64>> = part.members.iter().map(|&m| feature_vector(&raw[m], config.normalize)).collect();
        let mut r = rng::substream(config.seed, pi as u64);
        let reps = kmeans_representatives(&points, k, config, &mut r);
        for rep in reps {
            out.push(raw[part.members[rep]].to_track()?);
        }
    }
    Ok(out)
}

fn feature_vector(sample: &MatchSample, normalize: Option<(f64, f64)>) -> Vec<f64> {
    let (sx, sy) = normalize.map_or((1.0, 1.0), |(w, h)| (1.0 / w, 1.0 / h));
    sample.observations().into_iter().flatten().flat_map(|c| [c.x * sx, c.y * sy]).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd iterations; returns, per cluster,
/// the index of the member nearest its centroid (ties to the lowest index).
fn kmeans_representatives(points: &[Vec<f64>], k: usize, config: &SamplerConfig, r: &mut rng::Rng) -> Vec<usize> {
    let n = points.len();
    debug_assert!(k >= 1 && k <= n);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut chosen = vec![false; n];
    let first = r.random_range(0..n);
    chosen[first] = true;
    centroids.push(points[first].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = r.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                pick = Some(i);
                if u < d {
                    break;
                }
                u -= d;
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // every point coincides with a centroid: take an unused duplicate
            let unused: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            unused[r.random_range(0..unused.len())]
        };
        chosen[pick] = true;
        centroids.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[pick]));
        }
    }

    let dim = points[0].len();
    let mut assign = vec![0usize; n];
    let tol2 = config.tolerance * config.tolerance;
    for _ in 0..config.max_iterations {
        for (i, p) in points.iter().enumerate() {
            assign[i] = nearest(p, &centroids);
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i]].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut moved = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mean: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            moved = moved.max(sq_dist(&mean, &centroids[c]));
            centroids[c] = mean;
        }
        if moved < tol2 {
            break;
        }
    }
    for (i, p) in points.iter().enumerate() {
        assign[i] = nearest(p, &centroids);
    }

    let mut used = vec![false; n];
    let mut reps = vec![usize::MAX; k];
    for c in 0..k {
        let best = (0..n).filter(|&i| assign[i] == c).min_by(|&a, &b| {
            sq_dist(&points[a], &centroids[c]).total_cmp(&sq_dist(&points[b], &centroids[c])).then(a.cmp(&b))
        });
        if let Some(b) = best {
            reps[c] = b;
            used[b] = true;
        }
    }
    // clusters left empty (duplicate points) take the nearest unused point
    for c in 0..k {
        if reps[c] != usize::MAX {
            continue;
        }
        let best = (0..n)
            .filter(|&i| !used[i])
            .min_by(|&a, &b| {
                sq_dist(&points[a], &centroids[c]).total_cmp(&sq_dist(&points[b], &centroids[c])).then(a.cmp(&b))
            })
            .expect("k <= n leaves an unused point");
        reps[c] = best;
        used[best] = true;
    }
    reps
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, q) in centroids.iter().enumerate() {
        let d = sq_dist(p, q);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}
