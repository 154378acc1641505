use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use epcv_cli::config::{KernelChoice, Switch};
use epcv_cli::run::{run_benchmark, run_fit, run_trace, run_validate, summarize, ValidateOptions};
use epcv_cli::{RunConfig, Settings};

#[derive(Parser)]
#[command(name = "epcv", version, about = "Gaussian process classifier model selection by EP leave-one-out criteria")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select hyperparameters on one training split and score its test split.
    Fit(RunArgs),
    /// Sweep all partitions and summarize the test metrics.
    Benchmark(RunArgs),
    /// Record the per-iteration optimizer trace on one partition.
    Trace(RunArgs),
    /// Run the oracle, fidelity and scaling self-checks.
    Validate {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Random instances per oracle check.
        #[arg(long, default_value_t = 25)]
        seeds: u64,
        /// Timing repetitions per problem size.
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Key = value settings file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// first, last or a 0-based column index.
    #[arg(long)]
    label_col: Option<String>,
    /// Skip the first non-comment line of the dataset.
    #[arg(long)]
    header: bool,
    /// Binarize multiclass labels with this class as positive.
    #[arg(long)]
    positive_class: Option<f64>,
    /// Partition file (train/test index lines); replaces stratified splits.
    #[arg(long)]
    partitions: Option<PathBuf>,
    #[arg(long)]
    nr: Option<usize>,
    #[arg(long)]
    train_frac: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// EP_CV_NLP, EP_CV_FM, EP_CV_WER, EP_CV_AUC, EP_ML, LS_CV_NLP or NLP_FM_BIAS.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    zeta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_enum)]
    kernel: Option<KernelChoice>,
    #[arg(long, value_enum)]
    standardize: Option<Switch>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Partitions run concurrently (default: available cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Write 0 for wall times so repeated runs are byte-identical.
    #[arg(long)]
    no_timing: bool,
    #[arg(long)]
    max_outer: Option<usize>,
    /// 1-based partition for fit and trace.
    #[arg(long)]
    partition: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let base = match &self.config {
            Some(path) => Settings::from_file(path)?,
            None => Settings::default(),
        };
        let flags = Settings {
            data: self.data.clone(),
            label_col: self.label_col.clone(),
            header: self.header.then_some(true),
            positive_class: self.positive_class,
            partitions: self.partitions.clone(),
            nr: self.nr,
            train_frac: self.train_frac,
            seed: self.seed,
            method: self.method.clone(),
            zeta: self.zeta,
            tau: self.tau,
            kernel: self.kernel,
            standardize: self.standardize,
            out: self.out.clone(),
            workers: self.workers,
            timing: self.no_timing.then_some(Switch::Off),
            max_outer: self.max_outer,
            partition: self.partition,
            ..Settings::default()
        };
        Ok(RunConfig::from_settings(&base.overlay(&flags))?)
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Fit(args) => {
            let cfg = args.resolve()?;
            let report = run_fit(&cfg).context("fit failed")?;
            let s = &report.scores;
            println!(
                "{} partition {}: error {:.2}% nlp {:.2} F {} ({} iterations)",
                cfg.method,
                cfg.partition,
                100.0 * s.test_error,
                100.0 * s.test_nlp,
                s.test_f.map_or("undefined".into(), |f| format!("{:.2}", 100.0 * f)),
                s.iterations
            );
        }
        Command::Benchmark(args) => {
            let cfg = args.resolve()?;
            let report = run_benchmark(&cfg).context("benchmark failed")?;
            for (name, stat) in summarize(&report) {
                if let Some(s) = stat {
                    println!("{name:>16} {:10.4} ± {:.4}", s.mean, s.std);
                }
            }
            println!("{} of {} partitions failed; output in {}", report.failed(), report.rows.len(), cfg.out.display());
            if report.too_many_failures() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Trace(args) => {
            let cfg = args.resolve()?;
            let result = run_trace(&cfg).context("trace failed")?;
            println!("{} iterations written to {}", result.iterations(), cfg.out.join("trace.csv").display());
        }
        Command::Validate { out, seeds, reps } => {
            let opts = ValidateOptions { seeds, timing_reps: reps, ..ValidateOptions::default() };
            let checks = run_validate(&opts, out.as_deref())?;
            let mut all = true;
            for c in &checks {
                all &= c.passed;
                let verdict = if c.passed { "PASS" } else { "FAIL" };
                println!("{verdict} {} value {:.3e} tolerance {:.3e}", c.name, c.value, c.tolerance);
            }
            if !all {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
