//! From dense group warps to SfM tracks.
//!
//! A directed pair may be matched by several groups. [`select_matches`] keeps
//! the most confident candidate per pixel, [`reciprocity_filter`] drops
//! pixels whose forward-backward cycle does not close, and the surviving
//! confidences feed a per-source score map that rewards long, confident
//! tracks. Keypoints are picked from it with greedy NMS and turned into
//! tracks by reading the selected warps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{DenseWarpField, GridCoord};
use crate::groups::ImageGroup;
use crate::tracks::TrackToken;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    /// Cycle-error threshold in pixels.
    pub eps_p: f64,
    /// Minimum confidence of a valid correspondence.
    pub tau: f64,
    pub nms_radius: usize,
    pub max_keypoints: Option<usize>,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { eps_p: 3.0, tau: 0.3, nms_radius: 2, max_keypoints: None }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_p >= 0.0) {
            return Err(invalid(format!("eps_p must be non-negative, got {}", self.eps_p)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(invalid(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if self.nms_radius == 0 {
            return Err(invalid("NMS radius must be at least 1"));
        }
        Ok(())
    }
}

/// Candidate warps for one directed pair, one per group that matched it.
#[derive(Clone, Debug, Default)]
pub struct PairMatchBank {
    candidates: Vec<(usize, DenseWarpField)>,
}

impl PairMatchBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the warp produced by group `group`. All candidates must cover the
    /// same directed pair at the same resolution.
    pub fn push(&mut self, group: usize, warp: DenseWarpField) -> Result<()> {
        if let Some((_, first)) = self.candidates.first() {
            if (first.source_view(), first.target_view()) != (warp.source_view(), warp.target_view()) {
                return Err(invalid("bank candidates must share one directed pair"));
            }
            if (first.height(), first.width()) != (warp.height(), warp.width()) {
                return Err(Error::DimensionMismatch("bank candidates differ in size".into()));
            }
        }
        self.candidates.push((group, warp));
        Ok(())
    }

    pub fn candidates(&self) -> &[(usize, DenseWarpField)] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Per-pixel winner of a [`PairMatchBank`].
#[derive(Clone, Debug, PartialEq)]
pub struct SelectedMatch {
    pub warp: DenseWarpField,
    /// Group id of the winning candidate at each pixel.
    pub group: Vec<usize>,
}

/// Keeps, per pixel, the candidate with the highest confidence. Ties go to
/// the candidate with the lowest group id.
pub fn select_matches(bank: &PairMatchBank) -> Result<SelectedMatch> {
    let Some((_, first)) = bank.candidates.first() else {
        return Err(Error::InsufficientData("empty match bank".into()));
    };
    let n = first.len();
    let mut best = vec![0usize; n];
    for i in 0..n {
        for k in 1..bank.candidates.len() {
            let (g, w) = &bank.candidates[k];
            let (bg, bw) = &bank.candidates[best[i]];
            let (c, bc) = (w.confidence()[i], bw.confidence()[i]);
            if c > bc || (c == bc && g < bg) {
                best[i] = k;
            }
        }
    }
    let targets = best.iter().enumerate().map(|(i, &k)| bank.candidates[k].1.targets()[i]).collect();
    let confidence = best.iter().enumerate().map(|(i, &k)| bank.candidates[k].1.confidence()[i]).collect();
    let warp = DenseWarpField::new(
        first.height(),
        first.width(),
        targets,
        confidence,
        first.source_view(),
        first.target_view(),
    )?;
    let group = best.iter().map(|&k| bank.candidates[k].0).collect();
    Ok(SelectedMatch { warp, group })
}

/// Forward-backward cycle error at each source pixel, `None` where the
/// forward target leaves the backward warp's image.
pub fn cycle_errors(forward: &DenseWarpField, backward: &DenseWarpField) -> Result<Vec<Option<f64>>> {
    if forward.source_view() != backward.target_view() || forward.target_view() != backward.source_view() {
        return Err(invalid(format!(
            "warps {}->{} and {}->{} are not opposite directions of one pair",
            forward.source_view(),
            forward.target_view(),
            backward.source_view(),
            backward.target_view()
        )));
    }
    let (bh, bw) = (backward.height(), backward.width());
    let w = forward.width();
    Ok(forward
        .targets()
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if !t.inside(bh, bw) {
                return None;
            }
            let u = GridCoord::new((i % w) as f64, (i / w) as f64);
            Some(backward.sample_target(t).distance(u))
        })
        .collect())
}

/// Pixels whose cycle error is at most `eps_p`.
pub fn reciprocity_filter(forward: &DenseWarpField, backward: &DenseWarpField, eps_p: f64) -> Result<Vec<bool>> {
    Ok(cycle_errors(forward, backward)?.into_iter().map(|e| e.is_some_and(|e| e <= eps_p)).collect())
}

/// Per-pixel track length `L`, mean valid confidence `C` and score `L + C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    length: Vec<usize>,
    mean_confidence: Vec<f64>,
}

impl ScoreMap {
    /// Score map from explicit score values, with `L = floor(S)`. Handy for
    /// exercising NMS on arbitrary maps.
    pub fn from_scores(height: usize, width: usize, scores: &[f64]) -> Result<Self> {
        if scores.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{height}x{width} score map needs {} values, got {}",
                height * width,
                scores.len()
            )));
        }
        if scores.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(invalid("scores must be finite and non-negative"));
        }
        let length: Vec<usize> = scores.iter().map(|s| s.floor() as usize).collect();
        let mean_confidence = scores.iter().zip(&length).map(|(s, &l)| s - l as f64).collect();
        Ok(Self { height, width, length, mean_confidence })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn length(&self) -> &[usize] {
        &self.length
    }

    pub fn mean_confidence(&self) -> &[f64] {
        &self.mean_confidence
    }

    pub fn score(&self, i: usize) -> f64 {
        self.length[i] as f64 + self.mean_confidence[i]
    }

    pub fn scores(&self) -> Vec<f64> {
        (0..self.length.len()).map(|i| self.score(i)).collect()
    }
}

/// One target view's evidence at the source pixels: selected confidences and
/// the reciprocity keep mask.
#[derive(Clone, Copy, Debug)]
pub struct TargetEvidence<'a> {
    pub confidence: &'a [f64],
    pub keep: &'a [bool],
}

/// `L(u)` counts targets with confidence above `tau` that survived the
/// reciprocity check; `C(u)` averages those confidences.
pub fn build_score_map(height: usize, width: usize, targets: &[TargetEvidence<'_>], tau: f64) -> Result<ScoreMap> {
    if targets.is_empty() {
        return Err(Error::InsufficientData("score map needs at least one target view".into()));
    }
    let n = height * width;
    if targets.iter().any(|t| t.confidence.len() != n || t.keep.len() != n) {
        return Err(Error::DimensionMismatch(format!("target evidence must have {n} entries")));
    }
    let mut length = vec![0usize; n];
    let mut mean_confidence = vec![0.0; n];
    for i in 0..n {
        let mut sum = 0.0;
        for t in targets {
            if t.keep[i] && t.confidence[i] > tau {
                length[i] += 1;
                sum += t.confidence[i];
            }
        }
        if length[i] > 0 {
            mean_confidence[i] = sum / length[i] as f64;
        }
    }
    Ok(ScoreMap { height, width, length, mean_confidence })
}

/// Greedy NMS: visits positive-score pixels by decreasing score (raster order
/// among ties) and keeps each one not within Chebyshev distance `radius` of
/// an earlier pick. Returns `(y, x)` pairs in selection order.
pub fn nms_select(score: &ScoreMap, radius: usize, max_keypoints: Option<usize>) -> Result<Vec<(usize, usize)>> {
    if radius == 0 {
        return Err(invalid("NMS radius must be at least 1"));
    }
    let (h, w) = (score.height, score.width);
    let scores = score.scores();
    let mut order: Vec<usize> = (0..h * w).filter(|&i| scores[i] > 0.0).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let limit = max_keypoints.unwrap_or(usize::MAX);
    let mut blocked = vec![false; h * w];
    let mut out = Vec::new();
    for i in order {
        if out.len() >= limit {
            break;
        }
        if blocked[i] {
            continue;
        }
        let (y, x) = (i / w, i % w);
        out.push((y, x));
        for yy in y.saturating_sub(radius)..=(y + radius).min(h - 1) {
            for xx in x.saturating_sub(radius)..=(x + radius).min(w - 1) {
                blocked[yy * w + xx] = true;
            }
        }
    }
    Ok(out)
}

/// Target-slot data for track assembly: the selected warp into that target
/// and its keep mask.
#[derive(Clone, Copy, Debug)]
pub struct TargetMatches<'a> {
    pub warp: &'a DenseWarpField,
    pub keep: &'a [bool],
}

/// One track per keypoint, visible in each target where the selected match
/// is confident and reciprocal. Keypoints with no valid target are dropped.
pub fn assemble_tracks(
    keypoints: &[(usize, usize)],
    targets: &[TargetMatches<'_>],
    tau: f64,
) -> Result<Vec<TrackToken>> {
    let Some(first) = targets.first() else {
        return Err(Error::InsufficientData("track assembly needs at least one target".into()));
    };
    let (h, w) = (first.warp.height(), first.warp.width());
    if targets.iter().any(|t| t.warp.height() != h || t.warp.width() != w || t.keep.len() != h * w) {
        return Err(Error::DimensionMismatch("target warps differ in size".into()));
    }
    let mut out = Vec::new();
    for &(y, x) in keypoints {
        if y >= h || x >= w {
            return Err(invalid(format!("keypoint ({x}, {y}) outside the {w}x{h} grid")));
        }
        let i = y * w + x;
        let mut obs = vec![Some(GridCoord::new(x as f64, y as f64))];
        obs.extend(targets.iter().map(|t| (t.keep[i] && t.warp.confidence()[i] > tau).then(|| t.warp.targets()[i])));
        if obs[1..].iter().any(Option::is_some) {
            out.push(TrackToken::from_observations(&obs)?);
        }
    }
    Ok(out)
}

/// Summary of a post-processing run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PostprocessStats {
    /// Confident forward matches checked for reciprocity.
    pub confident_matches: usize,
    /// Of those, matches that passed.
    pub kept_matches: usize,
    pub kept_match_rate: f64,
    pub num_tracks: usize,
    /// `length_histogram[l]` counts tracks visible in `l` views.
    pub length_histogram: Vec<usize>,
}

/// Tracks emitted for one group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupTracks {
    pub group: ImageGroup,
    pub tracks: Vec<TrackToken>,
}

/// Full post-processing over a set of groups. `warps[g][k]` is group `g`'s
/// finest warp from its source to its `k`-th target. Pairs that no group
/// matched in the reverse direction fail the reciprocity check everywhere.
pub fn postprocess_groups(
    groups: &[ImageGroup],
    warps: &[Vec<DenseWarpField>],
    config: &PostprocessConfig,
) -> Result<(Vec<GroupTracks>, PostprocessStats)> {
    config.validate()?;
    if groups.len() != warps.len() {
        return Err(Error::DimensionMismatch(format!("{} groups but {} warp sets", groups.len(), warps.len())));
    }
    let mut banks: BTreeMap<(usize, usize), PairMatchBank> = BTreeMap::new();
    for (g, (group, ws)) in groups.iter().zip(warps).enumerate() {
        if ws.len() != group.targets().len() {
            return Err(Error::DimensionMismatch(format!(
                "group {g} has {} targets but {} warps",
                group.targets().len(),
                ws.len()
            )));
        }
        for (&t, w) in group.targets().iter().zip(ws) {
            if (w.source_view(), w.target_view()) != (group.source(), t) {
                return Err(invalid(format!(
                    "group {g}: warp {}->{} does not match pair {}->{t}",
                    w.source_view(),
                    w.target_view(),
                    group.source()
                )));
            }
            banks.entry((group.source(), t)).or_default().push(g, w.clone())?;
        }
    }
    let mut selected = BTreeMap::new();
    for (&pair, bank) in &banks {
        selected.insert(pair, select_matches(bank)?.warp);
    }
    let mut keeps: BTreeMap<(usize, usize), Vec<bool>> = BTreeMap::new();
    let mut stats = PostprocessStats::default();
    for (&(a, b), fwd) in &selected {
        let keep = match selected.get(&(b, a)) {
            Some(bwd) => reciprocity_filter(fwd, bwd, config.eps_p)?,
            None => vec![false; fwd.len()],
        };
        for (c, k) in fwd.confidence().iter().zip(&keep) {
            if *c > config.tau {
                stats.confident_matches += 1;
                stats.kept_matches += usize::from(*k);
            }
        }
        keeps.insert((a, b), keep);
    }
    stats.kept_match_rate =
        if stats.confident_matches == 0 { 0.0 } else { stats.kept_matches as f64 / stats.confident_matches as f64 };

    let mut out = Vec::with_capacity(groups.len());
    for group in groups {
        let s = group.source();
        let slots: Vec<TargetMatches<'_>> = group
            .targets()
            .iter()
            .map(|&t| TargetMatches { warp: &selected[&(s, t)], keep: &keeps[&(s, t)] })
            .collect();
        let tracks = if let Some(first) = slots.first() {
            let (h, w) = (first.warp.height(), first.warp.width());
            let evidence: Vec<TargetEvidence<'_>> =
                slots.iter().map(|t| TargetEvidence { confidence: t.warp.confidence(), keep: t.keep }).collect();
            let score = build_score_map(h, w, &evidence, config.tau)?;
            let keypoints = nms_select(&score, config.nms_radius, config.max_keypoints)?;
            assemble_tracks(&keypoints, &slots, config.tau)?
        } else {
            Vec::new()
        };
        for t in &tracks {
            let l = t.length();
            if stats.length_histogram.len() <= l {
                stats.length_histogram.resize(l + 1, 0);
            }
            stats.length_histogram[l] += 1;
        }
        stats.num_tracks += tracks.len();
        out.push(GroupTracks { group: group.clone(), tracks });
    }
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn warp_from(h: usize, w: usize, conf: Vec<f64>, shift: (f64, f64), a: usize, b: usize) -> DenseWarpField {
        let targets = (0..h * w).map(|i| GridCoord::new((i % w) as f64 + shift.0, (i / w) as f64 + shift.1)).collect();
        DenseWarpField::new(h, w, targets, conf, a, b).unwrap()
    }

    #[test]
    fn defaults_are_shipped() {
        let c = PostprocessConfig::default();
        assert_eq!((c.eps_p, c.tau, c.nms_radius), (3.0, 0.3, 2));
    }

    #[test]
    fn single_group_selection_is_that_group() {
        let mut bank = PairMatchBank::new();
        let w = warp_from(3, 4, vec![0.5; 12], (0.25, -1.0), 0, 1);
        bank.push(7, w.clone()).unwrap();
        let sel = select_matches(&bank).unwrap();
        assert_eq!(sel.warp, w);
        assert!(sel.group.iter().all(|&g| g == 7));
        assert!(select_matches(&PairMatchBank::new()).is_err());
    }

    #[test]
    fn selection_picks_the_confident_group_and_breaks_ties_low() {
        let mut bank = PairMatchBank::new();
        bank.push(1, warp_from(1, 2, vec![0.4, 0.6], (1.0, 0.0), 0, 1)).unwrap();
        bank.push(0, warp_from(1, 2, vec![0.9, 0.6], (2.0, 0.0), 0, 1)).unwrap();
        let sel = select_matches(&bank).unwrap();
        assert_eq!(sel.group, vec![0, 0]);
        assert_eq!(sel.warp.target(0, 0).x, 2.0);
        assert_eq!(sel.warp.confidence_at(0, 0), 0.9);
        assert!(bank.push(2, warp_from(1, 2, vec![0.1; 2], (0.0, 0.0), 1, 0)).is_err());
    }

    #[test]
    fn constant_shift_cycle() {
        let (h, w) = (16, 16);
        let fwd = DenseWarpField::identity(h, w, 0, 1);
        let bwd = warp_from(h, w, vec![1.0; h * w], (5.0, 0.0), 1, 0);
        assert!(reciprocity_filter(&fwd, &bwd, 3.0).unwrap().iter().all(|k| !k));
        assert!(reciprocity_filter(&fwd, &bwd, 6.0).unwrap().iter().all(|&k| k));
        let back = DenseWarpField::identity(h, w, 1, 0);
        assert!(reciprocity_filter(&fwd, &back, 0.0).unwrap().iter().all(|&k| k));
        assert!(reciprocity_filter(&fwd, &fwd, 3.0).is_err());
    }

    #[test]
    fn targets_outside_the_image_are_rejected() {
        let fwd = warp_from(4, 4, vec![1.0; 16], (2.0, 0.0), 0, 1);
        let bwd = warp_from(4, 4, vec![1.0; 16], (-2.0, 0.0), 1, 0);
        let keep = reciprocity_filter(&fwd, &bwd, 1.0).unwrap();
        for (i, k) in keep.iter().enumerate() {
            assert_eq!(*k, i % 4 < 2, "pixel {i}");
        }
    }

    #[test]
    fn score_map_examples() {
        let ones = [true; 1];
        let conf: Vec<[f64; 1]> = vec![[0.9], [0.2], [0.5]];
        let ev: Vec<_> = conf.iter().map(|c| TargetEvidence { confidence: c, keep: &ones }).collect();
        let s = build_score_map(1, 1, &ev, 0.3).unwrap();
        assert_eq!(s.length()[0], 2);
        assert!((s.mean_confidence()[0] - 0.7).abs() < 1e-15);
        assert!((s.score(0) - 2.7).abs() < 1e-15);

        let full = [1.0];
        let ev = vec![TargetEvidence { confidence: &full, keep: &ones }; 4];
        assert_eq!(build_score_map(1, 1, &ev, 0.3).unwrap().score(0), 5.0);

        let dropped = [false];
        let ev = vec![TargetEvidence { confidence: &full, keep: &dropped }];
        assert_eq!(build_score_map(1, 1, &ev, 0.3).unwrap().score(0), 0.0);
        assert!(build_score_map(1, 1, &[], 0.3).is_err());
    }

    #[test]
    fn nms_single_pixel() {
        let mut s = vec![0.0; 25];
        s[13] = 1.5;
        let map = ScoreMap::from_scores(5, 5, &s).unwrap();
        assert_eq!(nms_select(&map, 2, None).unwrap(), vec![(2, 3)]);
        assert!(nms_select(&map, 0, None).is_err());
    }

    #[test]
    fn nms_respects_separation_and_cap() {
        let mut r = rng::seeded(3);
        let s: Vec<f64> = (0..100).map(|_| r.random_range(0.0..4.0)).collect();
        let map = ScoreMap::from_scores(10, 10, &s).unwrap();
        let picks = nms_select(&map, 2, None).unwrap();
        for (i, a) in picks.iter().enumerate() {
            for b in &picks[i + 1..] {
                assert!(a.0.abs_diff(b.0).max(a.1.abs_diff(b.1)) > 2);
            }
        }
        assert_eq!(nms_select(&map, 2, Some(3)).unwrap(), picks[..3].to_vec());
    }

    #[test]
    fn assembly_full_and_empty_tracks() {
        let w = DenseWarpField::identity(2, 2, 0, 1);
        let keep = [true, true, false, false];
        let slots = vec![TargetMatches { warp: &w, keep: &keep }; 4];
        let tracks = assemble_tracks(&[(0, 1), (1, 0)], &slots, 0.3).unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].visibility(), &[true; 5]);
        assert_eq!(tracks[0].source(), GridCoord::new(1.0, 0.0));
    }

    #[test]
    fn groups_with_gt_warps_give_exact_tracks() {
        let scene = crate::scene::SceneOracle::random_planar(3, 32, 32, 2).unwrap();
        let groups = vec![
            ImageGroup::new(0, vec![1, 2]).unwrap(),
            ImageGroup::new(1, vec![0]).unwrap(),
            ImageGroup::new(2, vec![0]).unwrap(),
        ];
        let warps: Vec<Vec<_>> = groups
            .iter()
            .map(|g| g.targets().iter().map(|&t| scene.gt_warp(g.source(), t).unwrap()).collect())
            .collect();
        let (out, stats) = postprocess_groups(&groups, &warps, &PostprocessConfig::default()).unwrap();
        assert!(stats.num_tracks > 0);
        assert!(stats.kept_match_rate > 0.9);
        for gt in &out {
            for t in &gt.tracks {
                for e in scene.gt_track_error(&gt.group, t).unwrap().into_iter().flatten() {
                    assert!(e < 1e-9);
                }
            }
        }
    }
}
