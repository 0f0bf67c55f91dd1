use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::{split, Dataset, Task};
use super::metrics::{metrics_classification, metrics_regression, TargetStats};
use super::model::{fit_model, FitOptions, Method, Predictions};
use crate::{Error, Result};

pub const RECORD_SCHEMA: u32 = 1;

/// One cell of the experiment grid. Failed cells carry `failure` and no
/// metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub schema: u32,
    pub dataset: String,
    pub task: Task,
    pub split: usize,
    /// Seed of the train/test permutation and of the fit.
    pub seed: u64,
    pub method: String,
    pub alpha: Option<f64>,
    /// Number of pseudo-points; `None` for the full GP.
    pub m: Option<usize>,
    pub blocks: Option<usize>,
    pub n_train: usize,
    pub n_test: usize,
    /// `smse`, `smll` for regression; `error`, `nll` for classification.
    pub metrics: BTreeMap<String, f64>,
    /// Approximate log marginal likelihood on standardised targets.
    pub energy: Option<f64>,
    /// Negative energy per optimiser evaluation.
    pub nlml_trace: Vec<f64>,
    pub status: String,
    pub failure: Option<String>,
    pub wall_ms: f64,
}

impl ExperimentRecord {
    pub fn key(&self) -> CellKey {
        CellKey { dataset: self.dataset.clone(), split: self.split, method: self.method.clone(), m: self.m }
    }

    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }

    /// Copy with the timing field zeroed, for determinism checks.
    pub fn without_timing(&self) -> Self {
        Self { wall_ms: 0.0, ..self.clone() }
    }
}

/// Identity of a grid cell; resumption skips cells whose key is on disk.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub dataset: String,
    pub split: usize,
    pub method: String,
    pub m: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixConfig {
    pub methods: Vec<Method>,
    pub num_pseudo: Vec<usize>,
    pub splits: usize,
    pub train_fraction: f64,
    pub seed: u64,
    /// Training points kept per split (desk-scale cap); `None` keeps all.
    pub max_train: Option<usize>,
    pub fit: FitOptions,
    pub workers: usize,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::vfe(), Method::pep(0.5), Method::pep(1.0)],
            num_pseudo: vec![5, 20],
            splits: 2,
            train_fraction: 0.5,
            seed: 0,
            max_train: Some(1000),
            fit: FitOptions::default(),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone)]
struct Cell<'a> {
    data: &'a Dataset,
    split: usize,
    method: Method,
    m: Option<usize>,
}

impl Cell<'_> {
    fn key(&self) -> CellKey {
        CellKey { dataset: self.data.name.clone(), split: self.split, method: self.method.label(), m: self.m }
    }
}

fn split_seed(base: u64, split: usize) -> u64 {
    base.wrapping_add(split as u64)
}

/// Grid order: dataset, split, method, then number of pseudo-points. The
/// full GP has one cell per split.
fn cells<'a>(datasets: &'a [Dataset], cfg: &MatrixConfig) -> Vec<Cell<'a>> {
    let mut out = Vec::new();
    for data in datasets {
        for split in 0..cfg.splits {
            for &method in &cfg.methods {
                if method.is_sparse() {
                    out.extend(cfg.num_pseudo.iter().map(|&m| Cell { data, split, method, m: Some(m) }));
                } else {
                    out.push(Cell { data, split, method, m: None });
                }
            }
        }
    }
    out
}

fn validate(datasets: &[Dataset], cfg: &MatrixConfig) -> Result<()> {
    if datasets.is_empty() || cfg.methods.is_empty() || cfg.splits == 0 {
        return Err(Error::arg("empty experiment grid"));
    }
    if cfg.methods.iter().any(Method::is_sparse) && (cfg.num_pseudo.is_empty() || cfg.num_pseudo.contains(&0)) {
        return Err(Error::arg("sparse methods need positive pseudo-point counts"));
    }
    let mut names: Vec<&str> = datasets.iter().map(|d| d.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::arg("dataset names must be unique"));
    }
    let mut labels: Vec<String> = cfg.methods.iter().map(Method::label).collect();
    labels.sort();
    if labels.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::arg("duplicate methods in grid"));
    }
    Ok(())
}

fn run_cell(cell: &Cell<'_>, cfg: &MatrixConfig) -> ExperimentRecord {
    let start = Instant::now();
    let seed = split_seed(cfg.seed, cell.split);
    let mut rec = ExperimentRecord {
        schema: RECORD_SCHEMA,
        dataset: cell.data.name.clone(),
        task: cell.data.task,
        split: cell.split,
        seed,
        method: cell.method.label(),
        alpha: cell.method.alpha(),
        m: cell.m,
        blocks: cell.method.blocks(),
        n_train: 0,
        n_test: 0,
        metrics: BTreeMap::new(),
        energy: None,
        nlml_trace: Vec::new(),
        status: "failed".into(),
        failure: None,
        wall_ms: 0.0,
    };
    let outcome = (|| -> Result<()> {
        let (train, test) = split(cell.data, cfg.train_fraction, seed)?;
        let train = match cfg.max_train {
            Some(cap) => train.subsample(cap, seed),
            None => train,
        };
        rec.n_train = train.len();
        rec.n_test = test.len();
        let mut fit_opts = cfg.fit.clone();
        fit_opts.train.seed = seed;
        let fitted = fit_model(&train, cell.method, cell.m.unwrap_or(0), &fit_opts)?;
        let metrics = match fitted.model.predict(&test.x, fit_opts.train.exec)? {
            Predictions::Regression { mean, var } => {
                let r = metrics_regression(&mean, &var, &test.y, &TargetStats::of(&train.y)?)?;
                [("smse", r.smse), ("smll", r.smll)]
            }
            Predictions::Classification { prob } => {
                let c = metrics_classification(&prob, &test.y)?;
                [("error", c.error), ("nll", c.nll)]
            }
        };
        if !fitted.energy.is_finite() {
            return Err(Error::Numerical("non-finite final energy".into()));
        }
        rec.metrics = metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        rec.energy = Some(fitted.energy);
        rec.nlml_trace = fitted.trace;
        rec.status = fitted.status;
        Ok(())
    })();
    if let Err(e) = outcome {
        rec.failure = Some(e.to_string());
        rec.metrics.clear();
    }
    rec.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    rec
}

/// Read JSON-lines records. Lines that do not parse (a write cut short by a
/// kill) are skipped.
pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if let Ok(r) = serde_json::from_str::<ExperimentRecord>(&line) {
            if r.schema == RECORD_SCHEMA {
                out.push(r);
            }
        }
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut f = std::io::BufWriter::new(File::create(&tmp)?);
        for r in records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Run every grid cell, appending each record to `out` as it completes.
///
/// With `resume`, cells already recorded in `out` are not recomputed;
/// otherwise `out` is truncated. On completion the file is rewritten in grid
/// order (records for cells outside this grid are kept after them), so the
/// final contents do not depend on scheduling or interruptions. A failing
/// cell produces a record with `failure` set and the matrix continues.
pub fn run_matrix(
    datasets: &[Dataset],
    cfg: &MatrixConfig,
    out: Option<&Path>,
    resume: bool,
) -> Result<Vec<ExperimentRecord>> {
    validate(datasets, cfg)?;
    let grid = cells(datasets, cfg);
    let order: HashMap<CellKey, usize> = grid.iter().enumerate().map(|(i, c)| (c.key(), i)).collect();

    let mut done: Vec<Option<ExperimentRecord>> = vec![None; grid.len()];
    let mut extra = Vec::new();
    if let (Some(path), true) = (out, resume) {
        if path.exists() {
            for r in read_records(path)? {
                match order.get(&r.key()) {
                    Some(&i) => done[i] = Some(r),
                    None => extra.push(r),
                }
            }
        }
    }
    let pending: Vec<usize> = (0..grid.len()).filter(|&i| done[i].is_none()).collect();

    let sink = match out {
        Some(path) => {
            let mut f = OpenOptions::new().create(true).append(resume).write(true).truncate(!resume).open(path)?;
            if resume {
                // Drop any partial trailing line before appending.
                f.write_all(b"\n")?;
            }
            Some(Mutex::new(f))
        }
        None => None,
    };
    let results = Mutex::new(Vec::with_capacity(pending.len()));
    let next = AtomicUsize::new(0);
    let sink_err: Mutex<Option<Error>> = Mutex::new(None);
    let workers = cfg.workers.clamp(1, pending.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = pending.get(k) else { break };
                let rec = run_cell(&grid[i], cfg);
                if let Some(sink) = &sink {
                    let mut line = serde_json::to_vec(&rec).expect("records serialise");
                    line.push(b'\n');
                    let mut f = sink.lock().expect("sink lock");
                    if let Err(e) = f.write_all(&line).and_then(|_| f.flush()) {
                        sink_err.lock().expect("error lock").get_or_insert(e.into());
                    }
                }
                results.lock().expect("results lock").push((i, rec));
            });
        }
    });
    if let Some(e) = sink_err.into_inner().expect("error lock") {
        return Err(e);
    }
    for (i, rec) in results.into_inner().expect("results lock") {
        done[i] = Some(rec);
    }
    let records: Vec<ExperimentRecord> = done.into_iter().map(|r| r.expect("every cell ran")).collect();
    if let Some(path) = out {
        drop(sink);
        let mut all = records.clone();
        all.extend(extra);
        write_records(path, &all)?;
    }
    Ok(records)
}

/// Plot-ready long format: one row per (record, metric), including `nlml`.
pub fn write_long_csv(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dataset", "method", "M", "split", "metric", "value"])?;
    for r in records.iter().filter(|r| r.is_ok()) {
        let m = r.m.map_or_else(String::new, |m| m.to_string());
        let nlml = r.energy.map(|e| ("nlml".to_string(), -e));
        for (k, v) in r.metrics.iter().map(|(k, v)| (k.clone(), *v)).chain(nlml) {
            w.write_record([r.dataset.as_str(), &r.method, &m, &r.split.to_string(), &k, &format!("{v:?}")])?;
        }
    }
    w.flush()?;
    Ok(())
}
