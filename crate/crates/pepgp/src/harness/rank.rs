use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::matrix::ExperimentRecord;
use crate::{Error, Result};

/// Histogram of `metric(a) - metric(b)` over cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffHistogram {
    pub a: String,
    pub b: String,
    /// `counts.len() + 1` bin edges; the last bin is closed.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
}

/// Rankings of the methods on one metric (lower is better).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRanks {
    pub metric: String,
    /// Mean rank over all cells.
    pub average_rank: BTreeMap<String, f64>,
    /// Mean rank per number of pseudo-points.
    pub average_rank_by_m: BTreeMap<usize, BTreeMap<String, f64>>,
    /// `wins[a][b]`: fraction of cells where `a` is strictly better than `b`.
    pub wins: BTreeMap<String, BTreeMap<String, f64>>,
    /// `ties[a][b]`: fraction of cells where `a` and `b` are equal.
    pub ties: BTreeMap<String, BTreeMap<String, f64>>,
    pub histograms: Vec<DiffHistogram>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub methods: Vec<String>,
    /// Number of (dataset, split, M) cells ranked.
    pub cells: usize,
    pub metrics: Vec<MetricRanks>,
}

pub const HISTOGRAM_BINS: usize = 20;

/// Ranks `1..=n` of `values` (ascending), ties sharing the mean of the
/// positions they occupy.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let r = (start + 1 + end) as f64 / 2.0;
        for &k in &idx[start..end] {
            ranks[k] = r;
        }
        start = end;
    }
    ranks
}

fn histogram(a: &str, b: &str, diffs: &[f64]) -> DiffHistogram {
    let lo = diffs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let edges = (0..=HISTOGRAM_BINS).map(|k| lo + width * k as f64).collect();
    let mut counts = vec![0; HISTOGRAM_BINS];
    for d in diffs {
        let k = (((d - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
        counts[k] += 1;
    }
    DiffHistogram {
        a: a.into(),
        b: b.into(),
        edges,
        counts,
        mean: diffs.iter().sum::<f64>() / diffs.len() as f64,
    }
}

type Cell = (String, usize, usize);

/// Rank the sparse methods within every (dataset, split, M) cell.
///
/// Records without pseudo-points (the full GP) are not ranked. Every method
/// present anywhere must have a successful record with every metric in every
/// cell; otherwise the missing entries are reported as
/// [`Error::IncompleteGrid`].
pub fn rank_summary(records: &[ExperimentRecord]) -> Result<RankSummary> {
    let sparse: Vec<&ExperimentRecord> = records.iter().filter(|r| r.m.is_some()).collect();
    if sparse.is_empty() {
        return Err(Error::arg("no pseudo-point records to rank"));
    }
    let methods: Vec<String> = sparse.iter().map(|r| r.method.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let metric_names: BTreeSet<String> = sparse.iter().flat_map(|r| r.metrics.keys().cloned()).collect();
    let mut table: BTreeMap<Cell, BTreeMap<&str, &ExperimentRecord>> = BTreeMap::new();
    for r in &sparse {
        let cell = (r.dataset.clone(), r.split, r.m.expect("filtered"));
        if table.entry(cell).or_default().insert(&r.method, r).is_some() {
            return Err(Error::arg(format!("duplicate record for {} split {} {}", r.dataset, r.split, r.method)));
        }
    }
    let mut missing = Vec::new();
    for ((ds, split, m), row) in &table {
        for meth in &methods {
            let ok = row.get(meth.as_str()).is_some_and(|r| {
                r.is_ok() && metric_names.iter().all(|k| r.metrics.get(k).is_some_and(|v| v.is_finite()))
            });
            if !ok {
                missing.push(format!("{ds} split {split} M={m} {meth}"));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::IncompleteGrid(missing));
    }

    let n_cells = table.len() as f64;
    let metrics = metric_names
        .iter()
        .map(|metric| {
            let mut rank_sum = vec![0.0; methods.len()];
            let mut by_m: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
            let mut better = vec![vec![0usize; methods.len()]; methods.len()];
            let mut equal = vec![vec![0usize; methods.len()]; methods.len()];
            let mut diffs = vec![vec![Vec::new(); methods.len()]; methods.len()];
            for ((_, _, m), row) in &table {
                let vals: Vec<f64> = methods.iter().map(|k| row[k.as_str()].metrics[metric]).collect();
                let ranks = average_ranks(&vals);
                let entry = by_m.entry(*m).or_insert_with(|| (vec![0.0; methods.len()], 0));
                entry.1 += 1;
                for (i, r) in ranks.iter().enumerate() {
                    rank_sum[i] += r;
                    entry.0[i] += r;
                }
                for i in 0..methods.len() {
                    for j in 0..methods.len() {
                        if vals[i] < vals[j] {
                            better[i][j] += 1;
                        } else if vals[i] == vals[j] {
                            equal[i][j] += 1;
                        }
                        if i < j {
                            diffs[i][j].push(vals[i] - vals[j]);
                        }
                    }
                }
            }
            let pairwise = |counts: &Vec<Vec<usize>>| -> BTreeMap<String, BTreeMap<String, f64>> {
                methods
                    .iter()
                    .enumerate()
                    .map(|(i, a)| {
                        let row = methods
                            .iter()
                            .enumerate()
                            .filter(|(j, _)| *j != i)
                            .map(|(j, b)| (b.clone(), counts[i][j] as f64 / n_cells))
                            .collect();
                        (a.clone(), row)
                    })
                    .collect()
            };
            let mut histograms = Vec::new();
            for i in 0..methods.len() {
                for j in i + 1..methods.len() {
                    histograms.push(histogram(&methods[i], &methods[j], &diffs[i][j]));
                }
            }
            MetricRanks {
                metric: metric.clone(),
                average_rank: methods.iter().cloned().zip(rank_sum.iter().map(|s| s / n_cells)).collect(),
                average_rank_by_m: by_m
                    .into_iter()
                    .map(|(m, (sums, n))| (m, methods.iter().cloned().zip(sums.iter().map(|s| s / n as f64)).collect()))
                    .collect(),
                wins: pairwise(&better),
                ties: pairwise(&equal),
                histograms,
            }
        })
        .collect();
    Ok(RankSummary { methods, cells: table.len(), metrics })
}

impl RankSummary {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    /// Long format: `metric, kind, method, other, M, value` with kinds
    /// `rank`, `win` and `tie` (`M` empty for all-cell averages).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["metric", "kind", "method", "other", "M", "value"])?;
        for mr in &self.metrics {
            for (meth, r) in &mr.average_rank {
                w.write_record([&mr.metric, "rank", meth, "", "", &format!("{r:?}")])?;
            }
            for (m, row) in &mr.average_rank_by_m {
                for (meth, r) in row {
                    w.write_record([&mr.metric, "rank", meth, "", &m.to_string(), &format!("{r:?}")])?;
                }
            }
            for (kind, table) in [("win", &mr.wins), ("tie", &mr.ties)] {
                for (a, row) in table {
                    for (b, v) in row {
                        w.write_record([&mr.metric, kind, a, b, "", &format!("{v:?}")])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}
