//! File emission: CSV tables, PPM heatmaps, JSON sidecars and binary
//! sample dumps.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::linear::CovTensor4;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Formats a float with 17 significant digits, enough to round-trip.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        // keep the sign of negative zero out of the output
        "0.0000000000000000e0".to_string()
    } else {
        format!("{v:.16e}")
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        if !p.as_os_str().is_empty() {
            fs::create_dir_all(p)?;
        }
    }
    Ok(())
}

/// Writes a numeric table with an optional header row.
pub fn write_csv_rows<'a, I>(path: &Path, header: Option<&[&str]>, rows: I) -> Result<()>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    if let Some(h) = header {
        w.write_record(h)?;
    }
    for row in rows {
        w.write_record(row.iter().map(|&v| fmt_f64(v)))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a matrix row by row without a header.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    write_csv_rows(path, None, rows.iter().map(Vec::as_slice))
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut data = Vec::new();
    let mut cols = 0;
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        cols = rec.len();
        for f in rec.iter() {
            data.push(f.parse::<f64>().map_err(|e| Error::Parse {
                offset: rec.position().map_or(0, |p| p.byte()),
                msg: e.to_string(),
            })?);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

/// Flattened covariance, row-major, `(rows*cols)^2` entries.
pub fn write_cov_csv(path: &Path, cov: &CovTensor4) -> Result<()> {
    write_matrix_csv(path, &cov.to_matrix())
}

/// Red-white-blue color for `v` in `[-1, 1]`: negative blue, positive red.
fn diverging(v: f64) -> [u8; 3] {
    let t = v.clamp(-1.0, 1.0);
    let fade = |x: f64| (255.0 * (1.0 - x)).round() as u8;
    if t >= 0.0 {
        [255, fade(t), fade(t)]
    } else {
        [fade(-t), fade(-t), 255]
    }
}

/// Binary P6 heatmap of `m`, symmetric color scale at `max |entry|`. Each
/// entry becomes a `cell x cell` pixel block.
pub fn write_heatmap_ppm(path: &Path, m: &DMatrix<f64>, cell: usize) -> Result<()> {
    ensure_parent(path)?;
    let cell = cell.max(1);
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let (h, w) = (m.nrows() * cell, m.ncols() * cell);
    let mut buf = Vec::with_capacity(h * w * 3 + 32);
    write!(buf, "P6\n{w} {h}\n255\n")?;
    for r in 0..h {
        for c in 0..w {
            let v = m[(r / cell, c / cell)];
            let t = if scale > 0.0 { v / scale } else { 0.0 };
            buf.extend_from_slice(&diverging(t));
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Pixel block size giving an image at least `target` pixels wide.
pub fn cell_for(n: usize, target: usize) -> usize {
    target.div_ceil(n.max(1)).max(1)
}

/// Writes `{"config": ..., "seed": ..., "version": ...}` next to an output.
pub fn write_sidecar(path: &Path, config: &impl Serialize, seed: u64, extra: Option<Value>) -> Result<()> {
    ensure_parent(path)?;
    let mut v = json!({
        "config": serde_json::to_value(config)?,
        "seed": seed,
        "version": VERSION,
    });
    if let (Some(Value::Object(extra)), Value::Object(obj)) = (extra, &mut v) {
        obj.extend(extra);
    }
    write_json(path, &v)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    ensure_parent(path)?;
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

const DUMP_MAGIC: &[u8; 4] = b"BNNS";

/// Writes `n` rows of `dim` samples: magic, `u32 n`, `u32 dim`, `u32`
/// layout length, layout JSON bytes, then little-endian `f64` row-major.
pub fn write_sample_dump(path: &Path, samples: &[f64], dim: usize, layout: &impl Serialize) -> Result<()> {
    if dim == 0 || samples.len() % dim != 0 {
        return Err(Error::shape("sample buffer is not a whole number of rows"));
    }
    ensure_parent(path)?;
    let layout = serde_json::to_vec(layout)?;
    let n = samples.len() / dim;
    let to_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::invalid("dump dimension exceeds u32"));
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&to_u32(n)?.to_le_bytes())?;
    w.write_all(&to_u32(dim)?.to_le_bytes())?;
    w.write_all(&to_u32(layout.len())?.to_le_bytes())?;
    w.write_all(&layout)?;
    for v in samples {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleDump {
    pub n: usize,
    pub dim: usize,
    pub layout: Value,
    pub samples: Vec<f64>,
}

pub fn read_sample_dump(path: &Path) -> Result<SampleDump> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let parse_err = |offset: usize, msg: &str| Error::Parse {
        offset: offset as u64,
        msg: msg.to_string(),
    };
    if bytes.get(0..4) != Some(DUMP_MAGIC) {
        return Err(parse_err(0, "missing BNNS magic"));
    }
    let u32_at = |o: usize| {
        bytes
            .get(o..o + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .ok_or_else(|| parse_err(o, "truncated header"))
    };
    let n = u32_at(4)?;
    let dim = u32_at(8)?;
    let ll = u32_at(12)?;
    let layout_bytes = bytes.get(16..16 + ll).ok_or_else(|| parse_err(16, "truncated layout"))?;
    let layout: Value = serde_json::from_slice(layout_bytes)?;
    let start = 16 + ll;
    let body = bytes
        .get(start..start + 8 * n * dim)
        .ok_or_else(|| parse_err(bytes.len(), "truncated sample data"))?;
    let samples = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(SampleDump { n, dim, layout, samples })
}

/// Histogram density estimate on `bins` equal bins over `[lo, hi]`; returns
/// `(bin center, density)` pairs.
pub fn histogram_density(xs: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<(f64, f64)> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in xs {
        if x >= lo && x < hi {
            counts[(((x - lo) / width) as usize).min(bins - 1)] += 1;
        }
    }
    let n = xs.len() as f64;
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (lo + (i as f64 + 0.5) * width, c as f64 / (n * width)))
        .collect()
}
