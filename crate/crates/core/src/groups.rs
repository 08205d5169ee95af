//! Image groups and their two-stage construction.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::DenseWarpField;
use crate::rng;

/// One source image plus up to `K` target images, processed jointly.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageGroup {
    source: usize,
    targets: Vec<usize>,
}

impl ImageGroup {
    pub fn new(source: usize, targets: Vec<usize>) -> Result<Self> {
        if targets.contains(&source) {
            return Err(invalid(format!("source {source} listed among its targets")));
        }
        let mut seen = targets.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != targets.len() {
            return Err(invalid("group targets must be distinct"));
        }
        Ok(Self { source, targets })
    }

    pub fn source(&self) -> usize {
        self.source
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    /// Number of views in the group, source included.
    pub fn num_views(&self) -> usize {
        self.targets.len() + 1
    }

    /// Scene view index of group slot `slot`; slot 0 is the source.
    pub fn view(&self, slot: usize) -> usize {
        if slot == 0 {
            self.source
        } else {
            self.targets[slot - 1]
        }
    }

    pub fn views(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.source).chain(self.targets.iter().copied())
    }
}

/// How an [`OverlapMatrix`] was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapMode {
    Visibility,
    Descriptor,
}

/// Pairwise image overlap scores in `[0, 1]`. Row `i`, column `j` is the
/// overlap of image `i` with image `j`; the diagonal is not used.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapMatrix {
    values: DMatrix<f64>,
    mode: OverlapMode,
}

impl OverlapMatrix {
    pub fn new(values: DMatrix<f64>, mode: OverlapMode) -> Result<Self> {
        if values.nrows() != values.ncols() || values.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "overlap matrix must be square and non-empty, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("overlap {v} outside [0, 1]")));
        }
        Ok(Self { values, mode })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mode(&self) -> OverlapMode {
        self.mode
    }
}

/// Visibility overlap: the fraction of source pixels whose match is more
/// confident than `tau_conf`. Pairs without a warp score 0; a pair with
/// several warps keeps the largest fraction.
pub fn overlap_from_matches(num_images: usize, warps: &[DenseWarpField], tau_conf: f64) -> Result<OverlapMatrix> {
    let mut values = DMatrix::zeros(num_images, num_images);
    for w in warps {
        let (i, j) = (w.source_view(), w.target_view());
        if i >= num_images || j >= num_images {
            return Err(invalid(format!("warp {i}->{j} outside {num_images} images")));
        }
        let valid = w.confidence().iter().filter(|&&c| c > tau_conf).count();
        let o = valid as f64 / w.len() as f64;
        values[(i, j)] = f64::max(values[(i, j)], o);
    }
    for i in 0..num_images {
        values[(i, i)] = 1.0;
    }
    OverlapMatrix::new(values, OverlapMode::Visibility)
}

/// Descriptor overlap: cosine similarity of global descriptors (one per
/// row), clamped to `[0, 1]`.
pub fn overlap_from_descriptors(descriptors: &DMatrix<f64>) -> Result<OverlapMatrix> {
    let m = descriptors.nrows();
    let norms: Vec<f64> = descriptors.row_iter().map(|r| r.norm()).collect();
    if let Some(i) = norms.iter().position(|n| !(*n > 0.0) || !n.is_finite()) {
        return Err(Error::Degenerate(format!("descriptor {i} has zero or non-finite norm")));
    }
    let values = DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            return 1.0;
        }
        let dot = descriptors.row(i).dot(&descriptors.row(j));
        (dot / (norms[i] * norms[j])).clamp(0.0, 1.0)
    });
    OverlapMatrix::new(values, OverlapMode::Descriptor)
}

/// Number of other images each image overlaps by more than `tau`.
pub fn high_overlap_counts(overlap: &OverlapMatrix, tau: f64) -> Vec<usize> {
    let m = overlap.len();
    (0..m).map(|i| (0..m).filter(|&j| j != i && overlap.get(i, j) > tau).count()).collect()
}

/// Per-image source quotas proportional to `(N_i + 1)^beta`, rounded by
/// largest remainder to sum exactly to `budget`, with every image getting at
/// least one group.
pub fn source_quotas(overlap: &OverlapMatrix, tau: f64, beta: f64, budget: usize) -> Result<Vec<usize>> {
    let counts = high_overlap_counts(overlap, tau);
    quotas_from_counts(&counts, beta, budget)
}

pub fn quotas_from_counts(counts: &[usize], beta: f64, budget: usize) -> Result<Vec<usize>> {
    let m = counts.len();
    if m == 0 {
        return Err(invalid("no images to sample"));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(invalid(format!("beta must lie in (0, 1), got {beta}")));
    }
    if budget < m {
        return Err(invalid(format!("group budget {budget} is below the image count {m}")));
    }
    let weights: Vec<f64> = counts.iter().map(|&n| (n as f64 + 1.0).powf(beta)).collect();
    let total: f64 = weights.iter().sum();
    let ideal: Vec<f64> = weights.iter().map(|w| budget as f64 * w / total).collect();
    let mut quotas: Vec<usize> = ideal.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..m).collect();
    // largest remainder first; larger weight, then lower index, on ties
    order.sort_by(|&a, &b| {
        let (ra, rb) = (ideal[a] - ideal[a].floor(), ideal[b] - ideal[b].floor());
        rb.total_cmp(&ra).then(weights[b].total_cmp(&weights[a])).then(a.cmp(&b))
    });
    for &i in order.iter().take(budget.saturating_sub(assigned)) {
        quotas[i] += 1;
    }
    // the floor is funded by the lightest image holding the largest quota,
    // which keeps quotas monotone in the weights
    while let Some(z) = quotas.iter().position(|&q| q == 0) {
        let donor = (0..m)
            .max_by(|&a, &b| quotas[a].cmp(&quotas[b]).then(weights[b].total_cmp(&weights[a])).then(a.cmp(&b)))
            .expect("non-empty");
        quotas[donor] -= 1;
        quotas[z] = 1;
    }
    Ok(quotas)
}

/// Directed-pair selection counts and the pairs still waiting for their
/// reverse direction.
#[derive(Clone, Debug, PartialEq)]
pub struct PairUsage {
    counts: DMatrix<usize>,
    pending: BTreeSet<(usize, usize)>,
}

impl PairUsage {
    pub fn new(num_images: usize) -> Self {
        Self { counts: DMatrix::zeros(num_images, num_images), pending: BTreeSet::new() }
    }

    pub fn count(&self, i: usize, j: usize) -> usize {
        self.counts[(i, j)]
    }

    /// Pairs `(j, i)`: image `j` still has to be matched back to `i`.
    pub fn pending(&self) -> &BTreeSet<(usize, usize)> {
        &self.pending
    }

    /// Whether `i` and `j` were paired in either direction.
    pub fn linked(&self, i: usize, j: usize) -> bool {
        self.counts[(i, j)] > 0 || self.counts[(j, i)] > 0
    }

    pub fn record(&mut self, i: usize, j: usize) {
        self.counts[(i, j)] += 1;
        self.pending.remove(&(i, j));
        if self.counts[(j, i)] == 0 {
            self.pending.insert((j, i));
        }
    }

    /// Directed adjacency: entry `(i, j)` is set when `i -> j` was used.
    pub fn adjacency(&self) -> DMatrix<bool> {
        self.counts.map(|c| c > 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionParams {
    /// Maximum targets per group.
    pub k: usize,
    pub alpha_src: f64,
    pub alpha_tgt: f64,
    pub lambda: f64,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self { k: 4, alpha_src: 1.0, alpha_tgt: 0.25, lambda: 1.0 }
    }
}

impl SelectionParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(invalid("groups need K >= 1 targets"));
        }
        if [self.alpha_src, self.alpha_tgt, self.lambda].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(invalid("alpha_src, alpha_tgt and lambda must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Greedy score of adding `j` to a group with source `i` and current
/// targets `current`.
pub fn selection_score(
    i: usize,
    j: usize,
    current: &[usize],
    overlap: &OverlapMatrix,
    usage: &PairUsage,
    params: &SelectionParams,
) -> f64 {
    let coherence: f64 = current.iter().map(|&k| overlap.get(k, j)).sum();
    (params.alpha_src * overlap.get(i, j) + params.alpha_tgt * coherence)
        / (1.0 + params.lambda * usage.count(i, j) as f64)
}

/// Best candidate among `allowed` by [`selection_score`], lowest index on
/// ties, or `None` when no candidate scores above zero.
fn best_candidate(
    source: usize,
    current: &[usize],
    allowed: impl Iterator<Item = usize>,
    overlap: &OverlapMatrix,
    usage: &PairUsage,
    params: &SelectionParams,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for j in allowed {
        let s = selection_score(source, j, current, overlap, usage, params);
        if s > 0.0 && best.is_none_or(|(_, b)| s > b) {
            best = Some((j, s));
        }
    }
    best.map(|(j, _)| j)
}

/// A group built by [`build_group`]. `starved` is set when no image could be
/// added at all.
#[derive(Clone, Debug, PartialEq)]
pub struct BuiltGroup {
    pub group: ImageGroup,
    pub starved: bool,
}

/// Greedily fills a group for `source`, updating `usage` for every pair it
/// selects.
pub fn build_group(
    source: usize,
    overlap: &OverlapMatrix,
    usage: &mut PairUsage,
    params: &SelectionParams,
) -> Result<BuiltGroup> {
    params.validate()?;
    let m = overlap.len();
    if source >= m {
        return Err(invalid(format!("source {source} outside {m} images")));
    }
    let mut targets = Vec::new();
    while targets.len() < params.k {
        let allowed = (0..m).filter(|&j| j != source && !targets.contains(&j));
        let Some(j) = best_candidate(source, &targets, allowed, overlap, usage, params) else {
            break;
        };
        targets.push(j);
    }
    for &j in &targets {
        usage.record(source, j);
    }
    let starved = targets.is_empty();
    Ok(BuiltGroup { group: ImageGroup::new(source, targets)?, starved })
}

/// Second stage: every image with pending reverse pairs becomes the source
/// of new groups. Pending partners fill the slots first; remaining slots go
/// to the best-scoring images already linked with the source, so no new
/// one-sided pair appears.
pub fn augment_reciprocity(
    overlap: &OverlapMatrix,
    usage: &mut PairUsage,
    params: &SelectionParams,
) -> Result<Vec<ImageGroup>> {
    params.validate()?;
    let m = overlap.len();
    let linked_after_stage1 = usage.adjacency();
    let mut out = Vec::new();
    for j in 0..m {
        let partners: Vec<usize> = usage.pending().iter().filter(|&&(a, _)| a == j).map(|&(_, b)| b).collect();
        for chunk in partners.chunks(params.k) {
            let mut targets = chunk.to_vec();
            while targets.len() < params.k {
                let allowed = (0..m).filter(|&k| {
                    k != j && !targets.contains(&k) && (linked_after_stage1[(j, k)] || linked_after_stage1[(k, j)])
                });
                let Some(k) = best_candidate(j, &targets, allowed, overlap, usage, params) else {
                    break;
                };
                targets.push(k);
            }
            for &k in &targets {
                usage.record(j, k);
            }
            out.push(ImageGroup::new(j, targets)?);
        }
    }
    Ok(out)
}

/// Total stage-1 group count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Budget {
    /// `ceil(M * sqrt(M))`.
    Full,
    /// Half of the full budget, rounded up.
    Half,
    Fixed(usize),
}

impl Budget {
    /// Group count for `m` images, never below `m` so every image can be a
    /// source.
    pub fn groups(self, m: usize) -> usize {
        let full = (m as f64 * (m as f64).sqrt()).ceil() as usize;
        let b = match self {
            Budget::Full => full,
            Budget::Half => full.div_ceil(2),
            Budget::Fixed(n) => n,
        };
        b.max(m)
    }
}

/// Order in which stage 1 visits sources.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceOrder {
    /// Smooth weighted round-robin over the quotas.
    RoundRobin,
    /// The round-robin schedule shuffled with the given seed.
    Shuffled(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupSamplerConfig {
    /// Overlap above which two images count as strongly overlapping.
    pub tau: f64,
    /// Confidence threshold for visibility overlap.
    pub tau_conf: f64,
    pub beta: f64,
    pub budget: Budget,
    pub order: SourceOrder,
    #[serde(flatten)]
    pub selection: SelectionParams,
}

impl Default for GroupSamplerConfig {
    fn default() -> Self {
        Self {
            tau: 0.3,
            tau_conf: 0.3,
            beta: 0.75,
            budget: Budget::Full,
            order: SourceOrder::RoundRobin,
            selection: SelectionParams::default(),
        }
    }
}

/// Result of two-stage group sampling.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupPlan {
    pub quotas: Vec<usize>,
    pub stage1: Vec<ImageGroup>,
    pub stage2: Vec<ImageGroup>,
    /// Stage-1 groups that found no target.
    pub starved: usize,
    pub usage: PairUsage,
}

impl GroupPlan {
    pub fn groups(&self) -> impl Iterator<Item = &ImageGroup> {
        self.stage1.iter().chain(&self.stage2)
    }
}

/// Source schedule in which image `i` appears exactly `quotas[i]` times,
/// spread out as evenly as the weights allow.
pub fn round_robin(quotas: &[usize]) -> Vec<usize> {
    let total: usize = quotas.iter().sum();
    let mut current = vec![0i64; quotas.len()];
    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        for (c, &q) in current.iter_mut().zip(quotas) {
            *c += q as i64;
        }
        let pick = (0..quotas.len()).max_by(|&a, &b| current[a].cmp(&current[b]).then(b.cmp(&a))).expect("non-empty");
        current[pick] -= total as i64;
        out.push(pick);
    }
    out
}

pub fn sample_groups(overlap: &OverlapMatrix, config: &GroupSamplerConfig) -> Result<GroupPlan> {
    config.selection.validate()?;
    let m = overlap.len();
    let budget = config.budget.groups(m);
    let quotas = source_quotas(overlap, config.tau, config.beta, budget)?;
    let mut schedule = round_robin(&quotas);
    if let SourceOrder::Shuffled(seed) = config.order {
        schedule.shuffle(&mut rng::seeded(seed));
    }
    let mut usage = PairUsage::new(m);
    let mut stage1 = Vec::with_capacity(schedule.len());
    let mut starved = 0;
    for source in schedule {
        let built = build_group(source, overlap, &mut usage, &config.selection)?;
        starved += usize::from(built.starved);
        stage1.push(built.group);
    }
    let stage2 = augment_reciprocity(overlap, &mut usage, &config.selection)?;
    Ok(GroupPlan { quotas, stage1, stage2, starved, usage })
}
