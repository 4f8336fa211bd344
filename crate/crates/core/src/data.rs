//! Datasets: synthetic generators, splits, standardization and loaders.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, n_classes: usize },
    Real(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Real(y) => y.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            Targets::Classes { .. } => Task::Classification,
            Targets::Real(_) => Task::Regression,
        }
    }

    fn subset(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, n_classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                n_classes: *n_classes,
            },
            Targets::Real(y) => Targets::Real(idx.iter().map(|&i| y[i]).collect()),
        }
    }
}

/// Inputs (`n x d`, one row per example) with their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: DMatrix<f64>,
    pub targets: Targets,
    pub name: String,
    pub seed: u64,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, targets: Targets, name: impl Into<String>, seed: u64) -> Result<Self> {
        if inputs.nrows() != targets.len() {
            return Err(Error::shape(format!(
                "{} input rows but {} targets",
                inputs.nrows(),
                targets.len()
            )));
        }
        if let Targets::Classes { labels, n_classes } = &targets {
            if let Some(&bad) = labels.iter().find(|&&l| l >= *n_classes) {
                return Err(Error::invalid(format!("label {bad} out of range for {n_classes} classes")));
            }
        }
        Ok(Dataset {
            inputs,
            targets,
            name: name.into(),
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn task(&self) -> Task {
        self.targets.task()
    }

    pub fn n_classes(&self) -> Option<usize> {
        match self.targets {
            Targets::Classes { n_classes, .. } => Some(n_classes),
            Targets::Real(_) => None,
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let inputs = DMatrix::from_fn(idx.len(), self.dim(), |r, c| self.inputs[(idx[r], c)]);
        Dataset {
            inputs,
            targets: self.targets.subset(idx),
            name: self.name.clone(),
            seed: self.seed,
        }
    }

    /// Seeded disjoint split into `n_train` training rows and the rest.
    pub fn split(&self, n_train: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if n_train == 0 || n_train >= self.len() {
            return Err(Error::invalid(format!(
                "training size {n_train} must lie in 1..{}",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::keyed(seed, 0));
        let (a, b) = idx.split_at(n_train);
        Ok((self.subset(a), self.subset(b)))
    }

    /// Split with a training fraction, e.g. `0.9`.
    pub fn split_fraction(&self, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let n_train = (self.len() as f64 * train_fraction).round() as usize;
        self.split(n_train, seed)
    }
}

/// Two interleaving half circles. The first `ceil(n/2)` points (label 0)
/// lie on the upper unit half circle, the rest (label 1) on the lower one
/// shifted by `(1, -0.5)`. Rows are shuffled with the seed.
pub fn two_moons(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::invalid("two_moons needs at least 2 points"));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::invalid("noise std must be non-negative"));
    }
    let n_out = n.div_ceil(2);
    let n_in = n / 2;
    let grid = |k: usize, m: usize| if m > 1 { PI * k as f64 / (m - 1) as f64 } else { 0.0 };
    let mut pts: Vec<([f64; 2], usize)> = Vec::with_capacity(n);
    for k in 0..n_out {
        let t = grid(k, n_out);
        pts.push(([t.cos(), t.sin()], 0));
    }
    for k in 0..n_in {
        let t = grid(k, n_in);
        pts.push(([1.0 - t.cos(), 1.0 - t.sin() - 0.5], 1));
    }
    let mut r = rng::keyed(seed, 0);
    pts.shuffle(&mut r);
    if noise_std > 0.0 {
        let mut nr = rng::keyed(seed, 1);
        for (p, _) in pts.iter_mut() {
            p[0] += noise_std * rng::std_normal(&mut nr);
            p[1] += noise_std * rng::std_normal(&mut nr);
        }
    }
    let inputs = DMatrix::from_fn(n, 2, |i, j| pts[i].0[j]);
    let labels = pts.iter().map(|p| p.1).collect();
    Dataset::new(inputs, Targets::Classes { labels, n_classes: 2 }, "two_moons", seed)
}

/// Noise-free regression function of [`toy_sine`].
pub fn toy_sine_mean(x: f64) -> f64 {
    (4.0 * (x - 4.3)).sin()
}

/// 750 points uniform on `[-2, -1.4]` and 750 on `[1.0, 1.8]`, targets
/// `sin(4(x - 4.3))` plus `N(0, 0.05^2)` noise.
pub fn toy_sine(seed: u64) -> Dataset {
    let mut r = rng::keyed(seed, 0);
    let mut xs = Vec::with_capacity(1500);
    for (lo, hi) in [(-2.0, -1.4), (1.0, 1.8)] {
        for _ in 0..750 {
            xs.push(r.random_range(lo..hi));
        }
    }
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| toy_sine_mean(x) + 0.05 * rng::std_normal(&mut r))
        .collect();
    Dataset::new(DMatrix::from_column_slice(1500, 1, &xs), Targets::Real(ys), "toy_sine", seed)
        .expect("consistent by construction")
}

/// Isotropic Gaussian clusters with centers drawn on a sphere of radius
/// `separation`, one per class. Classes are assigned round robin.
pub fn gaussian_blobs(n: usize, dim: usize, n_classes: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n == 0 || dim == 0 || n_classes == 0 {
        return Err(Error::invalid("gaussian_blobs needs positive n, dim and classes"));
    }
    let mut r = rng::keyed(seed, 0);
    let centers: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng::std_normal(&mut r)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| separation * x / norm).collect()
        })
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
    let mut inputs = DMatrix::zeros(n, dim);
    for i in 0..n {
        for j in 0..dim {
            inputs[(i, j)] = centers[labels[i]][j] + rng::std_normal(&mut r);
        }
    }
    Dataset::new(inputs, Targets::Classes { labels, n_classes }, "gaussian_blobs", seed)
}

/// Per-feature affine standardization fitted on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Constant features keep unit scale so they map to zero.
    pub fn fit(inputs: &DMatrix<f64>) -> Self {
        let n = inputs.nrows() as f64;
        let mut mean = Vec::with_capacity(inputs.ncols());
        let mut std = Vec::with_capacity(inputs.ncols());
        for col in inputs.column_iter() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            mean.push(m);
            std.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Standardizer { mean, std }
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        let mut out = ds.clone();
        for (j, mut col) in out.inputs.column_iter_mut().enumerate() {
            for v in col.iter_mut() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

/// Layout of a labeled CSV file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsvSchema {
    /// Label column; `None` selects the last column.
    pub label_column: Option<usize>,
    pub has_header: bool,
    pub task: Task,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            label_column: None,
            has_header: false,
            task: Task::Classification,
        }
    }
}

/// Reads a CSV of numeric features plus one label column. Class labels may
/// be arbitrary strings; they are mapped to indices in sorted order
/// (numeric order when every label parses as a number).
pub fn load_csv_labeled(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut features: Vec<f64> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    let mut width = None;
    for (row_idx, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        let n = rec.len();
        if *width.get_or_insert(n) != n {
            return Err(Error::Parse {
                offset: rec.position().map_or(0, |p| p.byte()),
                msg: format!("row {row_idx} has {n} fields, expected {}", width.unwrap()),
            });
        }
        let label_col = schema.label_column.unwrap_or(n - 1);
        if label_col >= n {
            return Err(Error::invalid(format!("label column {label_col} out of range")));
        }
        for (j, field) in rec.iter().enumerate() {
            if j == label_col {
                raw_labels.push(field.to_string());
            } else {
                features.push(field.parse::<f64>().map_err(|e| Error::Parse {
                    offset: rec.position().map_or(0, |p| p.byte()),
                    msg: format!("row {row_idx}, column {j}: {e}"),
                })?);
            }
        }
    }
    let n = raw_labels.len();
    if n == 0 {
        return Err(Error::invalid("CSV contains no rows"));
    }
    let d = features.len() / n;
    let inputs = DMatrix::from_row_slice(n, d, &features);
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    let targets = match schema.task {
        Task::Regression => Targets::Real(
            raw_labels
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::invalid(format!("target {s:?}: {e}"))))
                .collect::<Result<_>>()?,
        ),
        Task::Classification => {
            let distinct: BTreeSet<&str> = raw_labels.iter().map(String::as_str).collect();
            let mut classes: Vec<&str> = distinct.into_iter().collect();
            if classes.iter().all(|s| s.parse::<f64>().is_ok()) {
                classes.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
            }
            let labels = raw_labels
                .iter()
                .map(|s| classes.iter().position(|c| c == s).unwrap())
                .collect();
            Targets::Classes {
                labels,
                n_classes: classes.len(),
            }
        }
    };
    Dataset::new(inputs, targets, name, 0)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            offset: offset as u64,
            msg: "unexpected end of file in header".into(),
        })
}

fn idx_header(bytes: &[u8], magic: u32) -> Result<Vec<usize>> {
    let found = read_u32(bytes, 0)?;
    if found != magic {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("bad IDX magic {found:#010x}, expected {magic:#010x}"),
        });
    }
    let ndim = (magic & 0xff) as usize;
    (0..ndim).map(|k| read_u32(bytes, 4 + 4 * k).map(|v| v as usize)).collect()
}

/// Reads an IDX image/label pair (unsigned byte data). Pixels are scaled to
/// `[0, 1]` and then standardized to mean 0 and standard deviation 1 over
/// all pixels.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = fs::read(images_path)?;
    let lab = fs::read(labels_path)?;
    let dims = idx_header(&img, IDX_IMAGES)?;
    let ldims = idx_header(&lab, IDX_LABELS)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if ldims[0] != n {
        return Err(Error::Parse {
            offset: 4,
            msg: format!("label file holds {} items, image file {n}", ldims[0]),
        });
    }
    let d = h * w;
    let img_start = 16;
    let need = img_start + n * d;
    if img.len() < need {
        return Err(Error::Parse {
            offset: img.len() as u64,
            msg: format!("image data truncated, expected {need} bytes"),
        });
    }
    let lab_start = 8;
    if lab.len() < lab_start + n {
        return Err(Error::Parse {
            offset: lab.len() as u64,
            msg: format!("label data truncated, expected {} bytes", lab_start + n),
        });
    }
    let mut pixels: Vec<f64> = img[img_start..need].iter().map(|&b| b as f64 / 255.0).collect();
    let total = pixels.len() as f64;
    let m = pixels.iter().sum::<f64>() / total;
    let sd = (pixels.iter().map(|v| (v - m).powi(2)).sum::<f64>() / total).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    pixels.iter_mut().for_each(|v| *v = (*v - m) / sd);
    let labels: Vec<usize> = lab[lab_start..lab_start + n].iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(
        DMatrix::from_row_slice(n, d, &pixels),
        Targets::Classes { labels, n_classes },
        "idx",
        0,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn two_moons_balance_and_loci() {
        let ds = two_moons(500, 0.0, 0).unwrap();
        assert_eq!(ds.len(), 500);
        let Targets::Classes { labels, .. } = &ds.targets else { panic!() };
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 250);
        for (i, &l) in labels.iter().enumerate() {
            let (x, y) = (ds.inputs[(i, 0)], ds.inputs[(i, 1)]);
            let r = if l == 0 {
                (x * x + y * y).sqrt()
            } else {
                ((x - 1.0).powi(2) + (y + 0.5 - 1.0).powi(2)).sqrt()
            };
            assert!((r - 1.0).abs() < 1e-12);
        }
        let odd = two_moons(7, 0.1, 3).unwrap();
        let Targets::Classes { labels, .. } = &odd.targets else { panic!() };
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 4);
        assert_eq!(two_moons(101, 0.2, 9).unwrap(), two_moons(101, 0.2, 9).unwrap());
    }

    #[test]
    fn toy_sine_layout() {
        let ds = toy_sine(4);
        assert_eq!(ds.len(), 1500);
        let xs = ds.inputs.column(0);
        assert_eq!(xs.iter().filter(|&&x| (-2.0..=-1.4).contains(&x)).count(), 750);
        assert_eq!(xs.iter().filter(|&&x| (1.0..=1.8).contains(&x)).count(), 750);
        let Targets::Real(ys) = &ds.targets else { panic!() };
        let resid: Vec<f64> = xs.iter().zip(ys).map(|(&x, &y)| y - toy_sine_mean(x)).collect();
        let sd = crate::stats::variance(&resid).sqrt();
        assert!((sd - 0.05).abs() < 0.0025, "{sd}");
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let ds = two_moons(150, 0.1, 1).unwrap();
        let (a, b) = ds.split(100, 5).unwrap();
        assert_eq!((a.len(), b.len()), (100, 50));
        let rows = |d: &Dataset| -> Vec<(u64, u64)> {
            (0..d.len()).map(|i| (d.inputs[(i, 0)].to_bits(), d.inputs[(i, 1)].to_bits())).collect()
        };
        let ra = rows(&a);
        assert!(rows(&b).iter().all(|r| !ra.contains(r)));
        assert_eq!(ds.split(100, 5).unwrap().0, a);
        assert!(ds.split(150, 5).is_err());
    }

    #[test]
    fn standardize_train_split() {
        let ds = gaussian_blobs(300, 3, 3, 4.0, 2).unwrap();
        let st = Standardizer::fit(&ds.inputs);
        let z = st.apply(&ds);
        for col in z.inputs.column_iter() {
            let m = col.sum() / 300.0;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 300.0).sqrt();
            assert!(m.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9);
        }
        let flat = Dataset::new(DMatrix::from_element(4, 1, 2.0), Targets::Real(vec![0.0; 4]), "c", 0).unwrap();
        let z = Standardizer::fit(&flat.inputs).apply(&flat);
        assert!(z.inputs.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn csv_string_labels() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "5.1,3.5,1.4,0.2,setosa\n7.0,3.2,4.7,1.4,versicolor\n6.3,3.3,6.0,2.5,virginica\n4.9,3.0,1.4,0.2,setosa").unwrap();
        let ds = load_csv_labeled(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.n_classes()), (4, 4, Some(3)));
        assert_eq!(ds.targets, Targets::Classes { labels: vec![0, 1, 2, 0], n_classes: 3 });
    }

    #[test]
    fn csv_ragged_row_is_parse_error() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "1,2,0\n3,1").unwrap();
        assert!(load_csv_labeled(f.path(), &CsvSchema::default()).is_err());
    }

    #[test]
    fn idx_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        fs::write(&img, [0u8, 0, 8, 4, 0, 0, 0, 1]).unwrap();
        fs::write(&lab, [0u8, 0, 8, 1, 0, 0, 0, 1, 3]).unwrap();
        let err = load_idx(&img, &lab).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }), "{err}");
    }

    #[test]
    fn idx_roundtrip_standardized() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        let mut bytes = vec![0u8, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend([0, 255, 128, 64, 10, 20, 30, 40]);
        fs::write(&img, bytes).unwrap();
        fs::write(&lab, [0u8, 0, 8, 1, 0, 0, 0, 2, 1, 0]).unwrap();
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!((ds.len(), ds.dim()), (2, 4));
        let m = ds.inputs.iter().sum::<f64>() / 8.0;
        assert!(m.abs() < 1e-12);
        let mut trunc = fs::read(&img).unwrap();
        trunc.truncate(20);
        fs::write(&img, trunc).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(Error::Parse { offset: 20, .. })));
    }
}
