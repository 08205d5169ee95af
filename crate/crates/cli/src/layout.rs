//! File names inside a run directory and the JSON manifests linking them.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mvtrack::groups::ImageGroup;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const SCENE: &str = "scene.json";
pub const GROUPS: &str = "groups.json";
pub const MATCHES: &str = "matches.json";
pub const MATCH_LEVELS: &str = "match_levels.csv";
pub const SFM: &str = "sfm.json";
pub const POSTPROCESS_STATS: &str = "postprocess_stats.json";
pub const EVAL_HOMOGRAPHY: &str = "eval_homography.csv";
pub const EVAL_HOMOGRAPHY_PAIRS: &str = "eval_homography_pairs.csv";
pub const EVAL_TRIANGULATION: &str = "eval_triangulation.csv";

pub fn token_file(group: usize) -> String {
    format!("tracks/group_{group:04}.tsv")
}

pub fn warp_file(group: usize, source: usize, target: usize) -> String {
    format!("warps/g{group:04}_{source}_{target}.mvwf")
}

pub fn sfm_file(group: usize) -> String {
    format!("sfm/group_{group:04}.tsv")
}

/// Group manifest written by sample-groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupManifest {
    pub num_images: usize,
    pub budget: usize,
    pub quotas: Vec<usize>,
    pub starved: usize,
    pub groups: Vec<GroupEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub source: usize,
    pub targets: Vec<usize>,
    pub stage: u8,
}

impl GroupEntry {
    pub fn group(&self) -> Result<ImageGroup> {
        Ok(ImageGroup::new(self.source, self.targets.clone())?)
    }
}

/// Written by match: warp files per group, relative to the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchManifest {
    pub source: String,
    pub seed: u64,
    pub strides: Vec<u32>,
    pub groups: Vec<MatchedGroup>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedGroup {
    pub index: usize,
    pub source: usize,
    pub targets: Vec<usize>,
    pub warps: Vec<String>,
}

/// Written by postprocess: one track file per group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SfmManifest {
    pub files: Vec<String>,
}

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn create(&self, rel: &str) -> Result<BufWriter<fs::File>> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(BufWriter::new(fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?))
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let mut w = self.create(rel)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_json<T: DeserializeOwned>(&self, rel: &str) -> Result<T> {
        read_json(&self.path(rel))
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}
