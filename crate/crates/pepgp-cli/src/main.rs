use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pepgp::harness::{
    default_synthetic_hyper, fit_model, load_csv, load_inputs, metrics_classification, metrics_regression, rank_summary,
    read_records, run_matrix, synth_gen, write_csv, write_long_csv, CsvSchema, Dataset, FitOptions, MatrixConfig,
    Method, Model, Predictions, TargetStats, Task,
};
use pepgp::training::TrainConfig;
use pepgp::Exec;

#[derive(Parser)]
#[command(name = "pepgp", version, about = "Sparse GP regression and classification with Power EP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a regression dataset from a GP prior with an ARD SE kernel.
    SynthGen(SynthArgs),
    /// Fit a regression model and save it as JSON.
    FitReg(FitArgs),
    /// Fit a probit classification model and save it as JSON.
    FitCls(FitArgs),
    /// Predict with a saved model.
    Predict(PredictArgs),
    /// Score a saved model on labelled data.
    Eval(EvalArgs),
    /// Run the (method, M, split) experiment grid.
    RunMatrix(MatrixArgs),
    /// Rank methods from experiment records.
    Rank(RankArgs),
}

#[derive(Args)]
struct CsvArgs {
    /// Zero-based target column; defaults to the last column.
    #[arg(long)]
    target: Option<usize>,
    /// The file has no header row.
    #[arg(long)]
    no_header: bool,
}

impl CsvArgs {
    fn load(&self, path: &Path, task: Task) -> Result<Dataset> {
        let target = match self.target {
            Some(t) => t,
            None => last_column(path, !self.no_header)?,
        };
        let schema = CsvSchema { target, has_header: !self.no_header, task };
        load_csv(path, &schema).with_context(|| format!("reading {}", path.display()))
    }
}

fn last_column(path: &Path, has_header: bool) -> Result<usize> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let line = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .nth(usize::from(has_header))
        .with_context(|| format!("{} has no data rows", path.display()))?;
    Ok(line.split(',').count().saturating_sub(1))
}

#[derive(Args)]
struct TrainArgs {
    /// Number of pseudo-points.
    #[arg(long, default_value_t = 20)]
    num_pseudo: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optimiser evaluations (L-BFGS) or outer steps (Adam).
    #[arg(long)]
    max_evals: Option<usize>,
    #[arg(long, default_value_t = 200)]
    minibatch: usize,
    /// Gauss-Hermite nodes for non-conjugate tilted moments.
    #[arg(long, default_value_t = pepgp::likelihood::DEFAULT_QUAD_NODES)]
    quad_nodes: usize,
    /// Run numeric loops on one thread.
    #[arg(long)]
    sequential: bool,
}

impl TrainArgs {
    fn options(&self, task: Task) -> FitOptions {
        let mut train = match task {
            Task::Regression => TrainConfig::default(),
            Task::Classification => TrainConfig::classification(),
        };
        train.seed = self.seed;
        if let Some(n) = self.max_evals {
            train.max_evals = n;
        }
        train.minibatch = self.minibatch;
        train.exec = self.exec();
        FitOptions { train, quad_nodes: self.quad_nodes }
    }

    fn exec(&self) -> Exec {
        if self.sequential {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 5)]
    dim: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_var: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    data: PathBuf,
    #[command(flatten)]
    csv: CsvArgs,
    /// `vfe`, `gp`, or a power in [0, 1].
    #[arg(long, default_value = "0.5")]
    alpha: Method,
    /// Contiguous blocks for block (PITC-style) sites.
    #[arg(long)]
    blocks: Option<usize>,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV of inputs. With `--target`, that column is dropped.
    data: PathBuf,
    #[arg(long)]
    target: Option<usize>,
    #[arg(long)]
    no_header: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    data: PathBuf,
    #[command(flatten)]
    csv: CsvArgs,
    /// Write the metrics JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MatrixArgs {
    /// Numeric CSV files, one dataset each.
    data: Vec<PathBuf>,
    #[command(flatten)]
    csv: CsvArgs,
    #[arg(long)]
    classification: bool,
    /// Also run on a synthetic GP draw of this many points (5 inputs).
    #[arg(long)]
    synthetic: Option<usize>,
    /// Comma-separated methods: `vfe`, `gp`, or powers.
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1")]
    alpha: Vec<Method>,
    /// Contiguous blocks applied to every sparse method.
    #[arg(long)]
    blocks: Option<usize>,
    /// Comma-separated pseudo-point counts.
    #[arg(long, value_delimiter = ',', default_value = "5,20")]
    num_pseudo: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    splits: usize,
    #[arg(long, default_value_t = 0.5)]
    train_fraction: f64,
    /// Cap on training points per split; 0 lifts the cap.
    #[arg(long, default_value_t = 1000)]
    max_train: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_evals: Option<usize>,
    #[arg(long, default_value_t = 200)]
    minibatch: usize,
    #[arg(long, default_value_t = pepgp::likelihood::DEFAULT_QUAD_NODES)]
    quad_nodes: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Keep finished cells already in `--out`.
    #[arg(long)]
    resume: bool,
    /// JSON-lines record file.
    #[arg(long)]
    out: PathBuf,
    /// Plot-ready long-format CSV.
    #[arg(long)]
    long_csv: Option<PathBuf>,
}

#[derive(Args)]
struct RankArgs {
    records: PathBuf,
    /// Summary JSON.
    #[arg(long)]
    out: PathBuf,
    /// Long-format summary CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn read_model(path: &Path) -> Result<Model> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let h = default_synthetic_hyper(a.dim);
    let s = synth_gen(a.n, a.dim, &h, a.noise_var, a.seed)?;
    write_csv(&a.out, &s.data)?;
    eprintln!("wrote {} points in {} dimensions to {}", a.n, a.dim, a.out.display());
    Ok(())
}

fn fit(a: &FitArgs, task: Task) -> Result<()> {
    let data = a.csv.load(&a.data, task)?;
    let method = match (a.alpha, a.blocks) {
        (Method::Sparse { alpha, .. }, blocks) => Method::Sparse { alpha, blocks },
        (Method::Exact, None) => Method::Exact,
        (Method::Exact, Some(_)) => bail!("--blocks does not apply to the full GP"),
    };
    let fitted = fit_model(&data, method, a.train.num_pseudo, &a.train.options(task))?;
    write_json(&a.out, &serde_json::to_value(&fitted.model)?)?;
    eprintln!(
        "{}: energy {:.6} after {} evaluations ({})",
        method,
        fitted.energy,
        fitted.trace.len(),
        fitted.status
    );
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let x = match a.target {
        Some(target) => {
            let schema = CsvSchema { target, has_header: !a.no_header, task: Task::Regression };
            load_csv(&a.data, &schema)?.x
        }
        None => load_inputs(&a.data, !a.no_header)?,
    };
    let mut w = BufWriter::new(File::create(&a.out)?);
    match model.predict(&x, Exec::Parallel)? {
        Predictions::Regression { mean, var } => {
            writeln!(w, "mean,var")?;
            for (m, v) in mean.iter().zip(&var) {
                writeln!(w, "{m:?},{v:?}")?;
            }
        }
        Predictions::Classification { prob } => {
            writeln!(w, "prob")?;
            for p in &prob {
                writeln!(w, "{p:?}")?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let data = a.csv.load(&a.data, model.task)?;
    let value = match model.predict(&data.x, Exec::Parallel)? {
        Predictions::Regression { mean, var } => {
            let s = &model.standardizer;
            let stats = TargetStats { mean: s.y_mean, var: s.y_std * s.y_std };
            serde_json::to_value(metrics_regression(&mean, &var, &data.y, &stats)?)?
        }
        Predictions::Classification { prob } => serde_json::to_value(metrics_classification(&prob, &data.y)?)?,
    };
    match &a.out {
        Some(p) => write_json(p, &value)?,
        None => println!("{}", serde_json::to_string_pretty(&value)?),
    }
    Ok(())
}

fn matrix(a: &MatrixArgs) -> Result<()> {
    let task = if a.classification { Task::Classification } else { Task::Regression };
    let mut datasets = a.data.iter().map(|p| a.csv.load(p, task)).collect::<Result<Vec<_>>>()?;
    if let Some(n) = a.synthetic {
        if a.classification {
            bail!("--synthetic generates regression data");
        }
        let h = default_synthetic_hyper(5);
        datasets.push(synth_gen(n, 5, &h, h.noise_var(), a.seed)?.data);
    }
    if datasets.is_empty() {
        bail!("no datasets given");
    }
    let methods = a
        .alpha
        .iter()
        .map(|m| match *m {
            Method::Sparse { alpha, .. } => Method::Sparse { alpha, blocks: a.blocks },
            Method::Exact => Method::Exact,
        })
        .collect();
    let train = TrainArgs {
        num_pseudo: 0,
        seed: a.seed,
        max_evals: a.max_evals,
        minibatch: a.minibatch,
        quad_nodes: a.quad_nodes,
        sequential: false,
    };
    let cfg = MatrixConfig {
        methods,
        num_pseudo: a.num_pseudo.clone(),
        splits: a.splits,
        train_fraction: a.train_fraction,
        seed: a.seed,
        max_train: (a.max_train > 0).then_some(a.max_train),
        fit: train.options(task),
        workers: a.workers,
    };
    let records = run_matrix(&datasets, &cfg, Some(&a.out), a.resume)?;
    if let Some(p) = &a.long_csv {
        write_long_csv(p, &records)?;
    }
    let failed = records.iter().filter(|r| !r.is_ok()).count();
    eprintln!("{} records ({} failed) in {}", records.len(), failed, a.out.display());
    Ok(())
}

fn rank(a: &RankArgs) -> Result<()> {
    let records = read_records(&a.records)?;
    let summary = rank_summary(&records)?;
    summary.write_json(&a.out)?;
    if let Some(p) = &a.csv {
        summary.write_csv(p)?;
    }
    for mr in &summary.metrics {
        let ranks: Vec<String> = mr.average_rank.iter().map(|(m, r)| format!("{m} {r:.3}")).collect();
        eprintln!("{}: {}", mr.metric, ranks.join(", "));
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::SynthGen(a) => synth(&a),
        Command::FitReg(a) => fit(&a, Task::Regression),
        Command::FitCls(a) => fit(&a, Task::Classification),
        Command::Predict(a) => predict(&a),
        Command::Eval(a) => eval(&a),
        Command::RunMatrix(a) => matrix(&a),
        Command::Rank(a) => rank(&a),
    }
}
