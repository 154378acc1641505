//! Subcommand drivers and their CSV outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use epcv::data::{load_dataset, read_partitions, standardize, stratified_partitions, Dataset, PartitionSet, Split};
use epcv::ep::Prediction;
use epcv::evaluation::metric_suite;
use epcv::kernel::Hyperparams;
use epcv::model_selection::{predict_test, select, SelectionOptions, SelectionResult};
use epcv::parallel::Parallelism;
use epcv::validation::{complexity_check, fidelity_check, oracle_suite, Check};
use nalgebra::DMatrix;

use crate::config::{PartitionSource, RunConfig};
use crate::error::{CliError, Result};

/// Test metrics and optimizer summary for one partition.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionScores {
    pub test_error: f64,
    pub test_nlp: f64,
    /// `None` when the test split has no positives.
    pub test_f: Option<f64>,
    pub final_objective: f64,
    pub iterations: usize,
    pub wall_ms: u128,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionRow {
    /// 1-based.
    pub partition: usize,
    pub outcome: std::result::Result<PartitionScores, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub rows: Vec<PartitionRow>,
    pub out_dir: PathBuf,
}

impl BenchmarkReport {
    pub fn failed(&self) -> usize {
        self.rows.iter().filter(|r| r.outcome.is_err()).count()
    }

    /// More than a tenth of the partitions failed.
    pub fn too_many_failures(&self) -> bool {
        self.failed() * 10 > self.rows.len()
    }

    pub fn scores(&self) -> impl Iterator<Item = &PartitionScores> {
        self.rows.iter().filter_map(|r| r.outcome.as_ref().ok())
    }
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    let count = values.len();
    if count == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / count as f64;
    let std = if count > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(MeanStd { mean, std, count })
}

struct Prepared {
    data: Dataset,
    partitions: PartitionSet,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let data = load_dataset(&cfg.data, &cfg.format)?;
    let partitions = match &cfg.partitions {
        PartitionSource::File(path) => read_partitions(path, data.n())?,
        PartitionSource::Stratified { nr, train_fraction, seed } => {
            stratified_partitions(&data.labels, *nr, *train_fraction, *seed)?
        }
    };
    Ok(Prepared { data, partitions })
}

struct SplitData {
    x_train: DMatrix<f64>,
    y_train: Vec<f64>,
    x_test: DMatrix<f64>,
    y_test: Vec<f64>,
}

fn split_data(cfg: &RunConfig, data: &Dataset, split: &Split) -> Result<SplitData> {
    let train = data.subset(&split.train)?;
    let test = data.subset(&split.test)?;
    let (x_train, x_test) = if cfg.standardize {
        let (a, b, _) = standardize(&train.features, &test.features)?;
        (a, b)
    } else {
        (train.features, test.features)
    };
    Ok(SplitData { x_train, y_train: train.labels, x_test, y_test: test.labels })
}

fn selection_options(cfg: &RunConfig) -> SelectionOptions {
    SelectionOptions { parallelism: Parallelism::available(), ..cfg.selection.clone() }
}

fn fit_split(cfg: &RunConfig, s: &SplitData) -> Result<(SelectionResult, Vec<Prediction>)> {
    let opts = selection_options(cfg);
    let init = Hyperparams::initial(s.x_train.ncols(), cfg.kernel, cfg.method.uses_ridge());
    let result = select(cfg.method, &s.x_train, &s.y_train, &init, &opts)?;
    let predictions = predict_test(&result, &s.x_train, &s.y_train, &s.x_test, &opts)?;
    Ok((result, predictions))
}

fn score_split(cfg: &RunConfig, data: &Dataset, split: &Split) -> Result<PartitionScores> {
    let start = Instant::now();
    let s = split_data(cfg, data, split)?;
    let (result, predictions) = fit_split(cfg, &s)?;
    let probs: Vec<f64> = predictions.iter().map(|p| p.prob_pos).collect();
    let metrics = metric_suite(&probs, &s.y_test, cfg.selection.zeta, cfg.selection.tau)?;
    Ok(PartitionScores {
        test_error: metrics.error_rate,
        test_nlp: metrics.nlp,
        test_f: metrics.fmeasure,
        final_objective: result.final_value,
        iterations: result.iterations(),
        wall_ms: if cfg.record_timing { start.elapsed().as_millis() } else { 0 },
        converged: result.converged,
    })
}

#[cfg(feature = "parallel")]
fn map_partitions<U, F>(workers: usize, n: usize, f: F) -> Result<Vec<U>>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| CliError::Pool(e.to_string()))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(f).collect()))
}

#[cfg(not(feature = "parallel"))]
fn map_partitions<U, F>(_workers: usize, n: usize, f: F) -> Result<Vec<U>>
where
    F: Fn(usize) -> U,
{
    Ok((0..n).map(f).collect())
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Output { path: dir.to_path_buf(), source })
}

fn write_text(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|source| CliError::Output { path, source })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn pct(v: Option<f64>) -> String {
    cell(v.map(|x| 100.0 * x))
}

pub const PARTITION_HEADER: [&str; 13] = [
    "partition",
    "test_error_pct",
    "test_nlp_pct",
    "test_F_pct",
    "final_objective",
    "iterations",
    "wall_ms",
    "test_error",
    "test_nlp",
    "test_F",
    "converged",
    "status",
    "message",
];

fn partition_record(row: &PartitionRow) -> Vec<String> {
    let mut rec = vec![row.partition.to_string()];
    match &row.outcome {
        Ok(s) => {
            rec.extend([
                pct(Some(s.test_error)),
                pct(Some(s.test_nlp)),
                pct(s.test_f),
                s.final_objective.to_string(),
                s.iterations.to_string(),
                s.wall_ms.to_string(),
                s.test_error.to_string(),
                s.test_nlp.to_string(),
                cell(s.test_f),
                s.converged.to_string(),
                "ok".into(),
                String::new(),
            ]);
        }
        Err(message) => {
            rec.extend(std::iter::repeat_n(String::new(), 10));
            rec.extend(["failed".into(), message.replace(['\n', '\r'], " ")]);
        }
    }
    rec
}

/// Columns summarized in `summary.csv`, as (name, extractor).
type Column = (&'static str, fn(&PartitionScores) -> Option<f64>);

pub const SUMMARY_COLUMNS: [Column; 6] = [
    ("test_error_pct", |s| Some(100.0 * s.test_error)),
    ("test_nlp_pct", |s| Some(100.0 * s.test_nlp)),
    ("test_F_pct", |s| s.test_f.map(|f| 100.0 * f)),
    ("final_objective", |s| Some(s.final_objective)),
    ("iterations", |s| Some(s.iterations as f64)),
    ("wall_ms", |s| Some(s.wall_ms as f64)),
];

/// One statistic per summary column, over the partitions that succeeded.
pub fn summarize(report: &BenchmarkReport) -> Vec<(&'static str, Option<MeanStd>)> {
    SUMMARY_COLUMNS
        .iter()
        .map(|(name, get)| {
            let values: Vec<f64> = report.scores().filter_map(get).collect();
            (*name, mean_std(&values))
        })
        .collect()
}

fn write_summary(path: &Path, report: &BenchmarkReport) -> Result<()> {
    let stats = summarize(report);
    let mut header = vec!["partitions".to_string(), "failed".to_string()];
    let mut rec = vec![report.rows.len().to_string(), report.failed().to_string()];
    for (name, stat) in &stats {
        header.extend([format!("{name}_mean"), format!("{name}_std"), format!("{name}_count")]);
        rec.extend([
            cell(stat.map(|s| s.mean)),
            cell(stat.map(|s| s.std)),
            stat.map_or(0, |s| s.count).to_string(),
        ]);
    }
    let mut w = csv_writer(path)?;
    w.write_record(&header)?;
    w.write_record(&rec)?;
    w.flush().map_err(|source| CliError::Output { path: path.to_path_buf(), source })
}

/// Select and evaluate on every partition; writes `partitions.csv`,
/// `summary.csv` and `config.txt` under the output directory.
pub fn run_benchmark(cfg: &RunConfig) -> Result<BenchmarkReport> {
    let prepared = prepare(cfg)?;
    let splits = &prepared.partitions.splits;
    let outcomes = map_partitions(cfg.workers, splits.len(), |i| {
        let outcome = score_split(cfg, &prepared.data, &splits[i]).map_err(|e| e.to_string());
        if let Err(e) = &outcome {
            log::warn!("partition {} failed: {e}", i + 1);
        }
        PartitionRow { partition: i + 1, outcome }
    })?;
    let report = BenchmarkReport { rows: outcomes, out_dir: cfg.out.clone() };

    create_out_dir(&cfg.out)?;
    write_text(cfg.out.join("config.txt"), &cfg.echo())?;
    let path = cfg.out.join("partitions.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(PARTITION_HEADER)?;
    for row in &report.rows {
        w.write_record(partition_record(row))?;
    }
    w.flush().map_err(|source| CliError::Output { path: path.clone(), source })?;
    write_summary(&cfg.out.join("summary.csv"), &report)?;
    Ok(report)
}

fn chosen_split<'a>(cfg: &RunConfig, prepared: &'a Prepared) -> Result<&'a Split> {
    prepared.partitions.splits.get(cfg.partition - 1).ok_or_else(|| {
        CliError::Config(format!("partition {} requested but only {} exist", cfg.partition, prepared.partitions.count()))
    })
}

/// Per-iteration optimizer trace on one partition, written to `trace.csv`.
pub fn run_trace(cfg: &RunConfig) -> Result<SelectionResult> {
    let prepared = prepare(cfg)?;
    let s = split_data(cfg, &prepared.data, chosen_split(cfg, &prepared)?)?;
    let opts = selection_options(cfg);
    let init = Hyperparams::initial(s.x_train.ncols(), cfg.kernel, cfg.method.uses_ridge());
    let result = select(cfg.method, &s.x_train, &s.y_train, &init, &opts)?;

    create_out_dir(&cfg.out)?;
    write_text(cfg.out.join("config.txt"), &cfg.echo())?;
    let path = cfg.out.join("trace.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["iter", "smoothed_metric", "true_loo_metric", "objective", "grad_norm", "stage"])?;
    for r in &result.trace.records {
        w.write_record([
            r.iter.to_string(),
            r.smoothed_metric.to_string(),
            r.true_loo_metric.to_string(),
            r.objective.to_string(),
            r.grad_norm.to_string(),
            r.stage.to_string(),
        ])?;
    }
    w.flush().map_err(|source| CliError::Output { path, source })?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub result: SelectionResult,
    pub scores: PartitionScores,
}

/// One train/test run: `fit.csv` with the selected hyperparameters and test
/// metrics, `predictions.csv` with per-example test predictions.
pub fn run_fit(cfg: &RunConfig) -> Result<FitReport> {
    let start = Instant::now();
    let prepared = prepare(cfg)?;
    let split = chosen_split(cfg, &prepared)?;
    let s = split_data(cfg, &prepared.data, split)?;
    let (result, predictions) = fit_split(cfg, &s)?;
    let probs: Vec<f64> = predictions.iter().map(|p| p.prob_pos).collect();
    let metrics = metric_suite(&probs, &s.y_test, cfg.selection.zeta, cfg.selection.tau)?;
    let scores = PartitionScores {
        test_error: metrics.error_rate,
        test_nlp: metrics.nlp,
        test_f: metrics.fmeasure,
        final_objective: result.final_value,
        iterations: result.iterations(),
        wall_ms: if cfg.record_timing { start.elapsed().as_millis() } else { 0 },
        converged: result.converged,
    };

    create_out_dir(&cfg.out)?;
    write_text(cfg.out.join("config.txt"), &cfg.echo())?;
    let path = cfg.out.join("fit.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["key", "value"])?;
    let h = &result.best_theta;
    let mut pairs = vec![
        ("method".to_string(), cfg.method.name().to_string()),
        ("partition".into(), cfg.partition.to_string()),
        ("log_signal_variance".into(), h.log_signal_variance.to_string()),
    ];
    for (k, v) in h.log_lengthscales.iter().enumerate() {
        pairs.push((format!("log_lengthscale_{k}"), v.to_string()));
    }
    pairs.push(("bias".into(), h.bias.to_string()));
    if let Some(r) = h.log_ridge {
        pairs.push(("log_ridge".into(), r.to_string()));
    }
    pairs.extend([
        ("final_objective".into(), scores.final_objective.to_string()),
        ("iterations".into(), scores.iterations.to_string()),
        ("converged".into(), scores.converged.to_string()),
        ("test_error_pct".into(), pct(Some(scores.test_error))),
        ("test_nlp_pct".into(), pct(Some(scores.test_nlp))),
        ("test_F_pct".into(), pct(scores.test_f)),
        ("precision".into(), cell(metrics.precision)),
        ("recall".into(), cell(metrics.recall)),
        ("wer".into(), cell(metrics.wer)),
        ("auc".into(), cell(metrics.auc)),
        ("wall_ms".into(), scores.wall_ms.to_string()),
    ]);
    for (k, v) in &pairs {
        w.write_record([k, v])?;
    }
    w.flush().map_err(|source| CliError::Output { path, source })?;

    let path = cfg.out.join("predictions.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["row", "label", "latent_mean", "latent_variance", "prob_pos"])?;
    for ((row, label), p) in split.test.iter().zip(&s.y_test).zip(&predictions) {
        w.write_record([
            row.to_string(),
            label.to_string(),
            p.latent_mean.to_string(),
            p.latent_variance.to_string(),
            p.prob_pos.to_string(),
        ])?;
    }
    w.flush().map_err(|source| CliError::Output { path, source })?;
    Ok(FitReport { result, scores })
}

/// Size settings for the self-check suite.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidateOptions {
    pub seeds: u64,
    pub fidelity_n: usize,
    pub timing_sizes: Vec<usize>,
    pub timing_dim: usize,
    pub timing_reps: usize,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        ValidateOptions { seeds: 25, fidelity_n: 30, timing_sizes: vec![100, 200, 400], timing_dim: 5, timing_reps: 5 }
    }
}

/// Oracle, fidelity and scaling checks; writes `validation.csv` when an
/// output directory is given.
pub fn run_validate(opts: &ValidateOptions, out: Option<&Path>) -> Result<Vec<Check>> {
    let mut checks = oracle_suite(opts.seeds)?;
    checks.push(fidelity_check(3, opts.fidelity_n)?);
    checks.push(complexity_check(&opts.timing_sizes, opts.timing_dim, opts.timing_reps)?);
    if let Some(dir) = out {
        create_out_dir(dir)?;
        let path = dir.join("validation.csv");
        let mut w = csv_writer(&path)?;
        w.write_record(["check", "value", "tolerance", "passed"])?;
        for c in &checks {
            w.write_record([c.name.clone(), c.value.to_string(), c.tolerance.to_string(), c.passed.to_string()])?;
        }
        w.flush().map_err(|source| CliError::Output { path, source })?;
    }
    Ok(checks)
}
