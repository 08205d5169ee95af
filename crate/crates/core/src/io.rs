//! On-disk formats.
//!
//! - **MVWF** warp fields: `b"MVWF"`, then little-endian `u32` version (1),
//!   height, width, source view and target view, followed by `height * width`
//!   records of `(target_x, target_y, confidence)` as little-endian `f32`,
//!   raster order.
//! - **MVAP** attention parameters: `b"MVAP"`, `u32` version (1), `u32` dim,
//!   `f32` sigma, then little-endian `f32` row-major matrices in the order
//!   query layer 1 (2 x D), bias 1 (D), query layer 2 (D x D), bias 2 (D),
//!   key, value, out, track query, track key, track value, track out
//!   (D x D each).
//! - **Track TSV**: a header `#\tV\t<V>\tT\t<T>\tviews\t<comma list>`, a
//!   column line `token_id\tview_id\tx\ty`, then one row per visible
//!   observation. `view_id` is the image index from the header list.

use std::io::{BufRead, Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::attention::AttentionParams;
use crate::error::{Error, Result};
use crate::grid::{DenseWarpField, GridCoord};
use crate::tracks::TrackToken;

const WARP_MAGIC: &[u8; 4] = b"MVWF";
const PARAM_MAGIC: &[u8; 4] = b"MVAP";
const VERSION: u32 = 1;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

fn expect_header(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!("bad magic {m:?}, expected {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    Ok(())
}

pub fn write_warp(w: &mut impl Write, warp: &DenseWarpField) -> Result<()> {
    w.write_all(WARP_MAGIC)?;
    for v in [VERSION, warp.height() as u32, warp.width() as u32, warp.source_view() as u32, warp.target_view() as u32]
    {
        w.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(warp.len() * 12);
    for (t, &c) in warp.targets().iter().zip(warp.confidence()) {
        buf.extend_from_slice(&(t.x as f32).to_le_bytes());
        buf.extend_from_slice(&(t.y as f32).to_le_bytes());
        buf.extend_from_slice(&(c as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_warp(r: &mut impl Read) -> Result<DenseWarpField> {
    expect_header(r, WARP_MAGIC)?;
    let h = read_u32(r)? as usize;
    let w = read_u32(r)? as usize;
    let src = read_u32(r)? as usize;
    let tgt = read_u32(r)? as usize;
    let n = h.checked_mul(w).ok_or_else(|| Error::Format("warp size overflows".into()))?;
    let mut bytes = vec![0u8; n * 12];
    r.read_exact(&mut bytes)?;
    let mut targets = Vec::with_capacity(n);
    let mut conf = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(12) {
        let f = |k: usize| f32::from_le_bytes(rec[k..k + 4].try_into().expect("4 bytes")) as f64;
        targets.push(GridCoord::new(f(0), f(4)));
        conf.push(f(8));
    }
    DenseWarpField::new(h, w, targets, conf, src, tgt)
}

pub fn save_warp(path: &std::path::Path, warp: &DenseWarpField) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_warp(&mut f, warp)?;
    f.flush()?;
    Ok(())
}

pub fn load_warp(path: &std::path::Path) -> Result<DenseWarpField> {
    read_warp(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

fn write_f32s<'a>(buf: &mut Vec<u8>, values: impl Iterator<Item = &'a f64>) {
    for v in values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub fn write_params(w: &mut impl Write, params: &AttentionParams) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(PARAM_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(params.sigma() as f32).to_le_bytes());
    write_f32s(&mut buf, row_major(&params.mlp_w1).iter());
    write_f32s(&mut buf, params.mlp_b1.iter());
    write_f32s(&mut buf, row_major(&params.mlp_w2).iter());
    write_f32s(&mut buf, params.mlp_b2.iter());
    for m in params.projections() {
        write_f32s(&mut buf, row_major(m).iter());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_params(r: &mut impl Read) -> Result<AttentionParams> {
    expect_header(r, PARAM_MAGIC)?;
    let d = read_u32(r)? as usize;
    if d == 0 || d > 1 << 14 {
        return Err(Error::Format(format!("implausible attention dim {d}")));
    }
    let sigma = read_f32(r)? as f64;
    let mut mat = |rows: usize, cols: usize| -> Result<DMatrix<f64>> {
        let mut v = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            v.push(read_f32(r)? as f64);
        }
        Ok(DMatrix::from_row_slice(rows, cols, &v))
    };
    let w1 = mat(2, d)?;
    let b1 = DVector::from_column_slice(mat(d, 1)?.as_slice());
    let w2 = mat(d, d)?;
    let b2 = DVector::from_column_slice(mat(d, 1)?.as_slice());
    let projections = [mat(d, d)?, mat(d, d)?, mat(d, d)?, mat(d, d)?, mat(d, d)?, mat(d, d)?, mat(d, d)?];
    AttentionParams::from_parts(w1, b1, w2, b2, projections, sigma)
}

/// Tracks over the image list `views` (slot `k` of every token is image `views[k]`).
pub fn write_tracks_tsv(w: &mut impl Write, tracks: &[TrackToken], views: &[usize]) -> Result<()> {
    if tracks.iter().any(|t| t.num_views() != views.len()) {
        return Err(Error::DimensionMismatch("track length differs from view list".into()));
    }
    let list: Vec<String> = views.iter().map(|v| v.to_string()).collect();
    writeln!(w, "#\tV\t{}\tT\t{}\tviews\t{}", views.len(), tracks.len(), list.join(","))?;
    writeln!(w, "token_id\tview_id\tx\ty")?;
    for (i, t) in tracks.iter().enumerate() {
        for (slot, &view) in views.iter().enumerate() {
            if let Some(p) = t.coord(slot) {
                writeln!(w, "{i}\t{view}\t{}\t{}", p.x, p.y)?;
            }
        }
    }
    Ok(())
}

/// Parsed track file: the view list and the tokens over it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackFile {
    pub views: Vec<usize>,
    pub tracks: Vec<TrackToken>,
}

pub fn read_tracks_tsv(r: impl BufRead) -> Result<TrackFile> {
    let bad = |msg: String| Error::Format(msg);
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| bad("empty track file".into()))??;
    let fields: Vec<&str> = header.split('\t').collect();
    if fields.len() != 7 || fields[0] != "#" || fields[1] != "V" || fields[3] != "T" || fields[5] != "views" {
        return Err(bad(format!("bad track header {header:?}")));
    }
    let nv: usize = fields[2].parse().map_err(|_| bad("bad V".into()))?;
    let nt: usize = fields[4].parse().map_err(|_| bad("bad T".into()))?;
    let views: Vec<usize> = if fields[6].is_empty() {
        Vec::new()
    } else {
        fields[6].split(',').map(|s| s.parse().map_err(|_| bad(format!("bad view id {s:?}")))).collect::<Result<_>>()?
    };
    if views.len() != nv {
        return Err(bad("view list length differs from V".into()));
    }
    lines.next().ok_or_else(|| bad("missing column line".into()))??;
    let mut obs: Vec<Vec<Option<GridCoord>>> = vec![vec![None; nv]; nt];
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(bad(format!("bad track row {line:?}")));
        }
        let id: usize = cols[0].parse().map_err(|_| bad(format!("bad token id in {line:?}")))?;
        let view: usize = cols[1].parse().map_err(|_| bad(format!("bad view id in {line:?}")))?;
        let x: f64 = cols[2].parse().map_err(|_| bad(format!("bad x in {line:?}")))?;
        let y: f64 = cols[3].parse().map_err(|_| bad(format!("bad y in {line:?}")))?;
        let slot = views.iter().position(|&v| v == view).ok_or_else(|| bad(format!("view {view} not in header")))?;
        let entry = obs.get_mut(id).ok_or_else(|| bad(format!("token id {id} >= T")))?;
        entry[slot] = Some(GridCoord::new(x, y));
    }
    let tracks = obs.iter().map(|o| TrackToken::from_observations(o)).collect::<Result<_>>()?;
    Ok(TrackFile { views, tracks })
}
