use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::kernel::{gram, KernelHyper};
use crate::linalg::chol_psd;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

/// How to read a numeric CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    /// Zero-based index of the target column; the rest are inputs.
    pub target: usize,
    pub has_header: bool,
    pub task: Task,
}

/// Inputs and targets. Classification targets are `-1.0` or `+1.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub task: Task,
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, task: Task, x: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::arg(format!("{} input rows but {} targets", x.nrows(), y.len())));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::arg("dataset contains non-finite values"));
        }
        let y = match task {
            Task::Regression => y,
            Task::Classification => y.iter().map(|&v| signed_label(v)).collect::<Result<_>>()?,
        };
        Ok(Self { name: name.into(), task, x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            task: self.task,
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// First `n` rows in a seeded random order (all rows when `n >= len`).
    pub fn subsample(&self, n: usize, seed: u64) -> Self {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        idx.sort_unstable();
        self.select(&idx)
    }
}

/// `{0, 1}` and `{-1, +1}` both map to `{-1, +1}`.
fn signed_label(v: f64) -> Result<f64> {
    if v == 1.0 {
        Ok(1.0)
    } else if v == 0.0 || v == -1.0 {
        Ok(-1.0)
    } else {
        Err(Error::arg(format!("class label {v} is not one of 0, 1, -1")))
    }
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("data").to_string();
    let file = std::fs::File::open(path)?;
    read_csv(file, &name, schema)
}

/// Numeric rows of a CSV, each with its 1-based line number. All rows must
/// have the same width; blank lines are skipped.
fn numeric_rows<R: std::io::Read>(reader: R, has_header: bool) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(has_header).flexible(true).trim(csv::Trim::All).from_reader(reader);
    let mut width = None;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::Ingestion { line, message: format!("expected {w} fields, found {}", rec.len()) });
        }
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, cell)| match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                Ok(_) => Err(Error::Ingestion { line, message: format!("field {} is not finite: {cell:?}", j + 1) }),
                Err(_) => Err(Error::Ingestion { line, message: format!("field {} is not numeric: {cell:?}", j + 1) }),
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push((line, row));
    }
    Ok(rows)
}

/// Parse numeric CSV from any reader. Errors carry the 1-based line number.
pub fn read_csv<R: std::io::Read>(reader: R, name: &str, schema: &CsvSchema) -> Result<Dataset> {
    let rows = numeric_rows(reader, schema.has_header)?;
    let d = rows.first().map_or(0, |(_, r)| r.len().saturating_sub(1));
    let mut xs = Vec::with_capacity(rows.len() * d);
    let mut ys = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        if schema.target >= row.len() {
            return Err(Error::Ingestion {
                line,
                message: format!("target column {} but only {} fields", schema.target, row.len()),
            });
        }
        let y = row[schema.target];
        ys.push(match schema.task {
            Task::Regression => y,
            Task::Classification => signed_label(y).map_err(|e| Error::Ingestion { line, message: e.to_string() })?,
        });
        xs.extend(row.iter().enumerate().filter(|(j, _)| *j != schema.target).map(|(_, v)| *v));
    }
    Dataset::new(name, schema.task, DMatrix::from_row_slice(ys.len(), d, &xs), ys)
}

/// Read a CSV in which every column is an input.
pub fn load_inputs(path: &Path, has_header: bool) -> Result<DMatrix<f64>> {
    let rows = numeric_rows(std::fs::File::open(path)?, has_header)?;
    let d = rows.first().map_or(0, |(_, r)| r.len());
    let flat: Vec<f64> = rows.iter().flat_map(|(_, r)| r.iter().copied()).collect();
    Ok(DMatrix::from_row_slice(rows.len(), d, &flat))
}

/// Write inputs and target (last column) with a header row.
pub fn write_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..ds.dim()).map(|d| format!("x{d}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut row: Vec<String> = ds.x.row(i).iter().map(|v| format!("{v:?}")).collect();
        row.push(format!("{:?}", ds.y[i]));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Seeded random split with `round(fraction · N)` training points.
pub fn split(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::arg(format!("split fraction {fraction} outside (0, 1)")));
    }
    let n = ds.len();
    let n_train = (fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::arg(format!("split of {n} points at {fraction} leaves one side empty")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b) = idx.split_at(n_train);
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_unstable();
    b.sort_unstable();
    Ok((ds.select(&a), ds.select(&b)))
}

/// Per-column affine standardisation fitted on training data. Constant
/// columns get unit scale. Targets are standardised only for regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count().max(1) as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > 0.0 && sd.is_finite() { sd } else { 1.0 })
}

impl Standardizer {
    pub fn fit(train: &Dataset) -> Self {
        let (x_mean, x_std) = (0..train.dim()).map(|d| mean_std(train.x.column(d).iter().copied())).unzip();
        let (y_mean, y_std) = match train.task {
            Task::Regression => mean_std(train.y.iter().copied()),
            Task::Classification => (0.0, 1.0),
        };
        Self { x_mean, x_std, y_mean, y_std }
    }

    pub fn x(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, d| (x[(i, d)] - self.x_mean[d]) / self.x_std[d])
    }

    pub fn y(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.y_mean) / self.y_std).collect()
    }

    pub fn y_inverse(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| v * self.y_std + self.y_mean).collect()
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        let y = match ds.task {
            Task::Regression => self.y(&ds.y),
            Task::Classification => ds.y.clone(),
        };
        Dataset { name: ds.name.clone(), task: ds.task, x: self.x(&ds.x), y }
    }
}

/// Draw from a GP prior with ARD squared-exponential covariance.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub data: Dataset,
    pub latent: DVector<f64>,
    pub hyper: KernelHyper,
}

/// Default generating hyper-parameters for `d` input dimensions:
/// lengthscales `1 + d/2`, unit signal variance, noise variance 0.05.
pub fn default_synthetic_hyper(d: usize) -> KernelHyper {
    let ls: Vec<f64> = (0..d).map(|k| 1.0 + 0.5 * k as f64).collect();
    KernelHyper::new(&ls, 1.0, 0.05).expect("valid default hyper-parameters")
}

/// Largest `N` sampled densely.
pub const SYNTH_MAX_N: usize = 2000;

/// `N` inputs uniform on `[-2, 2]^D`, latent `f ~ GP(0, k)`, targets
/// `y = f + ε` with `ε ~ N(0, σ_y²)`. A noise variance of exactly zero is
/// honoured (the stored hyper-parameters keep a tiny positive value).
pub fn synth_gen(n: usize, d: usize, hyper: &KernelHyper, noise_var: f64, seed: u64) -> Result<Synthetic> {
    if n == 0 || n > SYNTH_MAX_N {
        return Err(Error::arg(format!("synthetic N must be in 1..={SYNTH_MAX_N}, got {n}")));
    }
    if hyper.dim() != d {
        return Err(Error::arg(format!("hyper-parameters for {} dimensions, asked for {d}", hyper.dim())));
    }
    if !(noise_var >= 0.0) || !noise_var.is_finite() {
        return Err(Error::arg(format!("noise variance {noise_var} must be non-negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unif = Uniform::new(-2.0, 2.0).map_err(|e| Error::arg(e.to_string()))?;
    let x = DMatrix::from_fn(n, d, |_, _| unif.sample(&mut rng));
    let k = gram(&x, &x, hyper)?;
    let chol = chol_psd(&k)?;
    let e = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let f = chol.l() * e;
    let sd = noise_var.sqrt();
    let y: Vec<f64> = f
        .iter()
        .map(|fi| {
            let eps: f64 = StandardNormal.sample(&mut rng);
            fi + sd * eps
        })
        .collect();
    let h = hyper.with_noise_var(noise_var.max(1e-12))?;
    Ok(Synthetic { data: Dataset::new(format!("synth-n{n}-d{d}-s{seed}"), Task::Regression, x, y)?, latent: f, hyper: h })
}
