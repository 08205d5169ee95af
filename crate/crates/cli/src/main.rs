//! `mvtrack` command-line front end.
//!
//! Every subcommand works inside a run directory given by `--out`: inputs
//! produced by earlier steps are read from it and outputs are written to
//! it, so a full run is a sequence of invocations sharing one `--out`.

mod commands;
mod config;
mod layout;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "mvtrack", version, about = "Multi-view dense matching and SfM track pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene with exact ground truth.
    GenScene(Common),
    /// Sample track tokens for every group from simulated pairwise matches.
    BuildTracks(Common),
    /// Run the matcher on every group and write one warp file per pair.
    Match(Common),
    /// Turn group warps into SfM tracks.
    Postprocess(Common),
    /// Build image groups from pairwise overlap.
    SampleGroups(Common),
    /// Homography estimation from warps, scored by corner-error AUC.
    EvalHomography(Common),
    /// Triangulate SfM tracks and score accuracy and completeness.
    EvalTriangulation(Common),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BudgetArg {
    Full,
    Half,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML configuration file; defaults apply to anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Scene file (default: <out>/scene.json).
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Group manifest (default: <out>/groups.json).
    #[arg(long)]
    groups: Option<PathBuf>,
    /// Run directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Group budget for sample-groups.
    #[arg(long, value_enum)]
    budget: Option<BudgetArg>,
    /// Comma-separated evaluation thresholds (px for homographies, scene
    /// units for triangulation).
    #[arg(long, value_delimiter = ',')]
    threshold: Option<Vec<f64>>,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenScene(c) => commands::gen_scene(&c),
        Command::BuildTracks(c) => commands::build_tracks(&c),
        Command::Match(c) => commands::run_match(&c),
        Command::Postprocess(c) => commands::postprocess(&c),
        Command::SampleGroups(c) => commands::sample_groups(&c),
        Command::EvalHomography(c) => commands::eval_homography(&c),
        Command::EvalTriangulation(c) => commands::eval_triangulation(&c),
    }
}
