use std::fs;
use std::io::{BufReader, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use mvtrack::eval::{self, ViewTrack};
use mvtrack::groups::{self, Budget, ImageGroup};
use mvtrack::io;
use mvtrack::matcher::{run_group, MatcherParams, OracleFeatures};
use mvtrack::postprocess::postprocess_groups;
use mvtrack::rng;
use mvtrack::scene::{SceneFile, SceneOracle};
use mvtrack::tracks::{sample_tracks, SamplerConfig};
use mvtrack::{DenseWarpField, GridCoord};
use rand::Rng;

use crate::config::{Config, Estimator, SceneKind, WarpSource};
use crate::layout::{self, GroupEntry, GroupManifest, MatchManifest, MatchedGroup, RunDir, SfmManifest};
use crate::{BudgetArg, Common};

struct Ctx {
    config: Config,
    run: RunDir,
    scene_path: PathBuf,
    groups_path: PathBuf,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self> {
        let mut config = Config::load(c.config.as_deref())?;
        if let Some(seed) = c.seed {
            config.seed = seed;
        }
        // one seed drives the whole run, including the matcher weights
        config.matcher.network.seed = config.seed;
        if let Some(b) = c.budget {
            config.groups.sampler.budget = match b {
                BudgetArg::Full => Budget::Full,
                BudgetArg::Half => Budget::Half,
            };
        }
        if let Some(t) = &c.threshold {
            anyhow::ensure!(!t.is_empty(), "--threshold needs at least one value");
            config.eval.auc_thresholds = t.clone();
            config.eval.distance_thresholds = t.clone();
        }
        let run = RunDir::new(&c.out)?;
        let scene_path = c.scene.clone().unwrap_or_else(|| run.path(layout::SCENE));
        let groups_path = c.groups.clone().unwrap_or_else(|| run.path(layout::GROUPS));
        Ok(Self { config, run, scene_path, groups_path })
    }

    fn scene(&self) -> Result<SceneOracle> {
        let file: SceneFile = layout::read_json(&self.scene_path)?;
        SceneOracle::from_file(&file).with_context(|| format!("loading scene {}", self.scene_path.display()))
    }

    fn groups(&self) -> Result<(GroupManifest, Vec<ImageGroup>)> {
        let m: GroupManifest = layout::read_json(&self.groups_path)?;
        let g = m.groups.iter().map(GroupEntry::group).collect::<Result<_>>()?;
        Ok((m, g))
    }

    /// Deterministic per-item seed.
    fn item_seed(&self, stream: u64) -> u64 {
        rng::substream(self.config.seed, stream).random()
    }

    fn csv(&self, rel: &str) -> Result<csv::Writer<fs::File>> {
        let p = self.run.path(rel);
        csv::Writer::from_path(&p).with_context(|| format!("creating {}", p.display()))
    }
}

pub fn gen_scene(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let sc = &ctx.config.scene;
    let size = sc.size()?;
    let scene = match sc.kind {
        SceneKind::Planar => SceneOracle::random_planar(sc.views, size, size, ctx.config.seed)?,
        SceneKind::PointCloud => SceneOracle::random_point_cloud(sc.views, size, size, sc.points, ctx.config.seed)?,
    };
    let out = c.scene.clone().unwrap_or_else(|| ctx.run.path(layout::SCENE));
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(fs::File::create(&out)?);
    serde_json::to_writer_pretty(&mut w, &scene.to_file())?;
    writeln!(w)?;
    w.flush()?;
    eprintln!("scene: {} views, {size}x{size} -> {}", sc.views, out.display());
    Ok(())
}

pub fn sample_groups(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let scene = ctx.scene()?;
    let m = scene.num_views();
    let gc = &ctx.config.groups;
    let mut warps = Vec::with_capacity(m * m.saturating_sub(1));
    for a in 0..m {
        for b in 0..m {
            if a != b {
                warps.push(scene.gt_warp_at_stride(a, b, gc.overlap_stride)?);
            }
        }
    }
    let overlap = groups::overlap_from_matches(m, &warps, gc.sampler.tau_conf)?;
    let plan = groups::sample_groups(&overlap, &gc.sampler)?;
    let entries = plan
        .stage1
        .iter()
        .map(|g| (g, 1))
        .chain(plan.stage2.iter().map(|g| (g, 2)))
        .map(|(g, stage)| GroupEntry { source: g.source(), targets: g.targets().to_vec(), stage })
        .collect::<Vec<_>>();
    let manifest = GroupManifest {
        num_images: m,
        budget: gc.sampler.budget.groups(m),
        quotas: plan.quotas.clone(),
        starved: plan.starved,
        groups: entries,
    };
    if let Some(dir) = ctx.groups_path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = std::io::BufWriter::new(fs::File::create(&ctx.groups_path)?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    writeln!(w)?;
    w.flush()?;
    eprintln!("groups: {} stage 1, {} stage 2, {} starved", plan.stage1.len(), plan.stage2.len(), plan.starved);
    Ok(())
}

pub fn build_tracks(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let scene = ctx.scene()?;
    let (_, groups) = ctx.groups()?;
    let tc = &ctx.config.tracks;
    for (g, group) in groups.iter().enumerate() {
        let tracks = if group.targets().is_empty() {
            Vec::new()
        } else {
            let raw = scene.simulate_matcher(group, tc.raw_matches, tc.noise_sigma, tc.outlier_rate)?;
            let cfg = SamplerConfig {
                tokens: tc.tokens,
                seed: ctx.item_seed(g as u64),
                max_iterations: tc.max_iterations,
                ..SamplerConfig::default()
            };
            sample_tracks(&raw, &cfg)?
        };
        let views: Vec<usize> = group.views().collect();
        let mut w = ctx.run.create(&layout::token_file(g))?;
        io::write_tracks_tsv(&mut w, &tracks, &views)?;
        w.flush()?;
    }
    eprintln!("tracks: {} groups", groups.len());
    Ok(())
}

fn read_tracks(ctx: &Ctx, rel: &str) -> Result<io::TrackFile> {
    let p = ctx.run.path(rel);
    let f = fs::File::open(&p).with_context(|| format!("opening {}", p.display()))?;
    io::read_tracks_tsv(BufReader::new(f)).with_context(|| format!("parsing {}", p.display()))
}

/// End-point error statistics of `warp` against ground truth over the
/// pixels ground truth marks covisible.
fn epe(warp: &DenseWarpField, gt: &DenseWarpField) -> (usize, f64, f64) {
    let mut e: Vec<f64> = gt
        .confidence()
        .iter()
        .zip(gt.targets().iter().zip(warp.targets()))
        .filter(|(c, _)| **c > 0.0)
        .map(|(_, (g, w))| g.distance(*w))
        .collect();
    if e.is_empty() {
        return (0, 0.0, 0.0);
    }
    e.sort_by(f64::total_cmp);
    let mean = e.iter().sum::<f64>() / e.len() as f64;
    (e.len(), mean, e[e.len() / 2])
}

pub fn run_match(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let scene = ctx.scene()?;
    let (_, groups) = ctx.groups()?;
    let mc = &ctx.config.matcher;
    let net = &mc.network;
    let provider = OracleFeatures::new(&scene, ctx.config.seed).with_min_wavelength(mc.min_wavelength)?;
    let mut levels = ctx.csv(layout::MATCH_LEVELS)?;
    levels.write_record(["group", "source", "target", "stride", "covisible", "epe_mean", "epe_median"])?;
    let mut matched = Vec::with_capacity(groups.len());
    for (g, group) in groups.iter().enumerate() {
        let warps: Vec<DenseWarpField> = if group.targets().is_empty() {
            Vec::new()
        } else {
            match mc.source {
                WarpSource::GroundTruth => {
                    group.targets().iter().map(|&t| scene.gt_warp(group.source(), t)).collect::<mvtrack::Result<_>>()?
                }
                WarpSource::Oracle => {
                    let tracks = read_tracks(&ctx, &layout::token_file(g))?;
                    if tracks.views != group.views().collect::<Vec<_>>() {
                        bail!("track file of group {g} lists views {:?}", tracks.views);
                    }
                    let params = MatcherParams::seeded(net, &provider, group.source())?;
                    let out = run_group(group, &provider, &tracks.tracks, &params, net)?;
                    for level in &out.levels {
                        for (w, &t) in level.warps.iter().zip(group.targets()) {
                            let gt = scene.gt_warp_at_stride(group.source(), t, level.stride)?;
                            let (n, mean, median) = epe(w, &gt);
                            levels.write_record([
                                g.to_string(),
                                group.source().to_string(),
                                t.to_string(),
                                level.stride.to_string(),
                                n.to_string(),
                                mean.to_string(),
                                median.to_string(),
                            ])?;
                        }
                    }
                    let finest = *net.strides.last().expect("validated");
                    let ws = out.into_warps();
                    if finest == 1 {
                        ws
                    } else {
                        ws.iter()
                            .map(|w| mvtrack::grid::upsample_warp(w, finest as usize))
                            .collect::<mvtrack::Result<_>>()?
                    }
                }
            }
        };
        let mut files = Vec::with_capacity(warps.len());
        for (w, &t) in warps.iter().zip(group.targets()) {
            let rel = layout::warp_file(g, group.source(), t);
            let p = ctx.run.path(&rel);
            fs::create_dir_all(p.parent().expect("warp files live in a subdirectory"))?;
            io::save_warp(&p, w)?;
            files.push(rel);
        }
        matched.push(MatchedGroup {
            index: g,
            source: group.source(),
            targets: group.targets().to_vec(),
            warps: files,
        });
    }
    levels.flush()?;
    let source = match mc.source {
        WarpSource::Oracle => "oracle",
        WarpSource::GroundTruth => "ground-truth",
    };
    let manifest =
        MatchManifest { source: source.into(), seed: ctx.config.seed, strides: net.strides.clone(), groups: matched };
    ctx.run.write_json(layout::MATCHES, &manifest)?;
    eprintln!("match: {} groups", groups.len());
    Ok(())
}

fn load_matches(ctx: &Ctx) -> Result<(Vec<ImageGroup>, Vec<Vec<DenseWarpField>>)> {
    let manifest: MatchManifest = ctx.run.read_json(layout::MATCHES)?;
    let mut groups = Vec::with_capacity(manifest.groups.len());
    let mut warps = Vec::with_capacity(manifest.groups.len());
    for mg in &manifest.groups {
        groups.push(ImageGroup::new(mg.source, mg.targets.clone())?);
        let ws = mg
            .warps
            .iter()
            .map(|rel| io::load_warp(&ctx.run.path(rel)).with_context(|| format!("loading {rel}")))
            .collect::<Result<Vec<_>>>()?;
        warps.push(ws);
    }
    Ok((groups, warps))
}

pub fn postprocess(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let (groups, warps) = load_matches(&ctx)?;
    let (tracks, stats) = postprocess_groups(&groups, &warps, &ctx.config.postprocess)?;
    let mut files = Vec::with_capacity(tracks.len());
    for (g, gt) in tracks.iter().enumerate() {
        let rel = layout::sfm_file(g);
        let views: Vec<usize> = gt.group.views().collect();
        let mut w = ctx.run.create(&rel)?;
        io::write_tracks_tsv(&mut w, &gt.tracks, &views)?;
        w.flush()?;
        files.push(rel);
    }
    ctx.run.write_json(layout::SFM, &SfmManifest { files })?;
    ctx.run.write_json(layout::POSTPROCESS_STATS, &stats)?;
    eprintln!("postprocess: {} tracks, kept-match rate {:.4}", stats.num_tracks, stats.kept_match_rate);
    Ok(())
}

fn write_metric(w: &mut csv::Writer<fs::File>, metric: &str, threshold: Option<f64>, value: f64) -> Result<()> {
    w.write_record([metric.to_string(), threshold.map_or_else(String::new, |t| t.to_string()), value.to_string()])?;
    Ok(())
}

pub fn eval_homography(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let scene = ctx.scene()?;
    let (groups, warps) = load_matches(&ctx)?;
    let ec = &ctx.config.eval;
    let (h, w) = (scene.height(), scene.width());
    let mut pairs = ctx.csv(layout::EVAL_HOMOGRAPHY_PAIRS)?;
    pairs.write_record(["group", "source", "target", "matches", "inliers", "corner_error"])?;
    let mut errors = Vec::new();
    let mut stream = 0u64;
    for (g, (group, ws)) in groups.iter().zip(&warps).enumerate() {
        for (warp, &t) in ws.iter().zip(group.targets()) {
            let gt = scene.pair_homography(group.source(), t)?;
            let sample = eval::balanced_sample(warp, ec.max_matches, ec.min_confidence, ctx.item_seed(stream));
            let (src, dst): (Vec<GridCoord>, Vec<GridCoord>) = sample.into_iter().unzip();
            let fit = match ec.estimator {
                Estimator::Dlt => eval::dlt_homography(&src, &dst).map(|m| (m, src.len())),
                Estimator::Ransac => eval::ransac_homography(
                    &src,
                    &dst,
                    ec.ransac_threshold,
                    ec.ransac_iterations,
                    ctx.item_seed(stream),
                )
                .map(|r| (r.homography, r.num_inliers())),
            };
            stream += 1;
            // a failed fit scores zero at every threshold
            let (err, inliers) = match fit {
                Ok((m, n)) => (eval::corner_error(&m, &gt, h, w).unwrap_or(f64::INFINITY), n),
                Err(_) => (f64::INFINITY, 0),
            };
            errors.push(err);
            pairs.write_record([
                g.to_string(),
                group.source().to_string(),
                t.to_string(),
                src.len().to_string(),
                inliers.to_string(),
                err.to_string(),
            ])?;
        }
    }
    pairs.flush()?;
    if errors.is_empty() {
        bail!("no matched pairs to evaluate");
    }
    let auc = eval::corner_auc(&errors, &ec.auc_thresholds)?;
    let mut report = ctx.csv(layout::EVAL_HOMOGRAPHY)?;
    report.write_record(["metric", "threshold", "value"])?;
    for (&t, &a) in ec.auc_thresholds.iter().zip(&auc) {
        write_metric(&mut report, "auc", Some(t), a)?;
    }
    write_metric(&mut report, "pairs", None, errors.len() as f64)?;
    report.flush()?;
    for (t, a) in ec.auc_thresholds.iter().zip(&auc) {
        eprintln!("AUC@{t}px = {a:.4}");
    }
    Ok(())
}

pub fn eval_triangulation(c: &Common) -> Result<()> {
    let ctx = Ctx::new(c)?;
    let scene = ctx.scene()?;
    let (Some(cameras), Some(gt)) = (scene.cameras(), scene.points()) else {
        bail!("triangulation needs a point-cloud scene");
    };
    let manifest: SfmManifest = ctx.run.read_json(layout::SFM)?;
    let mut view_tracks: Vec<ViewTrack> = Vec::new();
    for rel in &manifest.files {
        let file = read_tracks(&ctx, rel)?;
        for t in &file.tracks {
            view_tracks
                .push(file.views.iter().enumerate().filter_map(|(slot, &v)| t.coord(slot).map(|p| (v, p))).collect());
        }
    }
    let report = eval::triangulate_tracks(&view_tracks, cameras)?;
    let ec = &ctx.config.eval;
    let (rows, empty) = eval::accuracy_completeness(&report.points, gt, &ec.distance_thresholds)?;
    let mut out = ctx.csv(layout::EVAL_TRIANGULATION)?;
    out.write_record(["metric", "threshold", "value"])?;
    for r in &rows {
        write_metric(&mut out, "accuracy", Some(r.threshold), r.accuracy)?;
        write_metric(&mut out, "completeness", Some(r.threshold), r.completeness)?;
    }
    write_metric(&mut out, "tracks", None, view_tracks.len() as f64)?;
    write_metric(&mut out, "triangulated", None, report.triangulated as f64)?;
    write_metric(&mut out, "skipped_short", None, report.skipped_short as f64)?;
    write_metric(&mut out, "degenerate", None, report.degenerate as f64)?;
    write_metric(&mut out, "behind", None, report.behind as f64)?;
    write_metric(&mut out, "empty", None, f64::from(u8::from(empty)))?;
    out.flush()?;
    for r in &rows {
        eprintln!("@{}: accuracy {:.4}, completeness {:.4}", r.threshold, r.accuracy, r.completeness);
    }
    Ok(())
}
