//! Run configuration: a flat key = value file overlaid by command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::ValueEnum;
use epcv::data::{FormatOptions, LabelColumn, LabelEncoding};
use epcv::kernel::KernelMode;
use epcv::model_selection::{Method, SelectionOptions};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelChoice {
    Ard,
    Shared,
}

impl From<KernelChoice> for KernelMode {
    fn from(k: KernelChoice) -> Self {
        match k {
            KernelChoice::Ard => KernelMode::Ard,
            KernelChoice::Shared => KernelMode::Shared,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        self == Switch::On
    }
}

impl From<bool> for Switch {
    fn from(b: bool) -> Self {
        if b {
            Switch::On
        } else {
            Switch::Off
        }
    }
}

/// Label column as written in configs: `first`, `last` or a 0-based index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelCol(pub LabelColumn);

impl FromStr for LabelCol {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "first" => Ok(LabelCol(LabelColumn::First)),
            "last" => Ok(LabelCol(LabelColumn::Last)),
            other => other
                .parse::<usize>()
                .map(|i| LabelCol(LabelColumn::Index(i)))
                .map_err(|_| CliError::Config(format!("label column '{s}' is not first, last or an index"))),
        }
    }
}

impl fmt::Display for LabelCol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            LabelColumn::First => f.write_str("first"),
            LabelColumn::Last => f.write_str("last"),
            LabelColumn::Index(i) => write!(f, "{i}"),
        }
    }
}

/// Every setting optional, so that a file and the flags can be layered.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub data: Option<PathBuf>,
    pub label_col: Option<String>,
    pub header: Option<bool>,
    /// Label value treated as the positive class; all others negative.
    pub positive_class: Option<f64>,
    /// Partition index file; overrides the stratified generator.
    pub partitions: Option<PathBuf>,
    pub nr: Option<usize>,
    pub train_frac: Option<f64>,
    pub seed: Option<u64>,
    pub method: Option<String>,
    pub zeta: Option<f64>,
    pub tau: Option<f64>,
    pub kernel: Option<KernelChoice>,
    pub standardize: Option<Switch>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    /// Write measured wall times; `off` writes 0 so outputs are byte-stable.
    pub timing: Option<Switch>,
    pub obj_tol: Option<f64>,
    pub grad_tol: Option<f64>,
    pub max_outer: Option<usize>,
    /// 1-based partition used by `fit` and `trace`.
    pub partition: Option<usize>,
}

macro_rules! overlay {
    ($base:expr, $over:expr, $($field:ident),+) => {
        $( if $over.$field.is_some() { $base.$field = $over.$field.clone(); } )+
    };
}

impl Settings {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|source| CliError::ConfigFile { path: path.to_path_buf(), source })?;
        Self::parse(&text).map_err(|source| CliError::ConfigSyntax { path: path.to_path_buf(), source })
    }

    pub fn parse(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// `over` wins wherever it is set.
    pub fn overlay(mut self, over: &Settings) -> Self {
        overlay!(
            self, over, data, label_col, header, positive_class, partitions, nr, train_frac, seed, method, zeta, tau,
            kernel, standardize, out, workers, timing, obj_tol, grad_tol, max_outer, partition
        );
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PartitionSource {
    File(PathBuf),
    Stratified { nr: usize, train_fraction: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: PathBuf,
    pub format: FormatOptions,
    pub partitions: PartitionSource,
    pub method: Method,
    pub kernel: KernelMode,
    pub standardize: bool,
    /// Optimizer settings, including ζ and τ.
    pub selection: SelectionOptions,
    pub out: PathBuf,
    pub workers: usize,
    pub record_timing: bool,
    pub partition: usize,
}

pub const DEFAULT_NR: usize = 10;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.6;
pub const DEFAULT_SEED: u64 = 1;

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl RunConfig {
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let data = s.data.clone().ok_or_else(|| CliError::Config("no dataset given (data)".into()))?;
        let label_column = match &s.label_col {
            Some(text) => text.parse::<LabelCol>()?.0,
            None => LabelColumn::First,
        };
        let labels = s.positive_class.map_or(LabelEncoding::Auto, LabelEncoding::OneVsRest);
        let format = FormatOptions { label_column, labels, skip_header: s.header.unwrap_or(false), ..FormatOptions::default() };
        let partitions = match &s.partitions {
            Some(path) => PartitionSource::File(path.clone()),
            None => PartitionSource::Stratified {
                nr: s.nr.unwrap_or(DEFAULT_NR),
                train_fraction: s.train_frac.unwrap_or(DEFAULT_TRAIN_FRACTION),
                seed: s.seed.unwrap_or(DEFAULT_SEED),
            },
        };
        let method = match &s.method {
            Some(m) => m.parse::<Method>()?,
            None => Method::EpCvNlp,
        };
        let defaults = SelectionOptions::default();
        let selection = SelectionOptions {
            zeta: s.zeta.unwrap_or(defaults.zeta),
            tau: s.tau.unwrap_or(defaults.tau),
            obj_tol: s.obj_tol.unwrap_or(defaults.obj_tol),
            grad_tol: s.grad_tol.unwrap_or(defaults.grad_tol),
            max_outer: s.max_outer.unwrap_or(defaults.max_outer),
            ..defaults
        };
        let config = RunConfig {
            data,
            format,
            partitions,
            method,
            kernel: s.kernel.unwrap_or(KernelChoice::Shared).into(),
            standardize: s.standardize.is_none_or(Switch::is_on),
            selection,
            out: s.out.clone().unwrap_or_else(|| PathBuf::from("epcv-out")),
            workers: s.workers.unwrap_or_else(default_workers),
            record_timing: s.timing.is_none_or(Switch::is_on),
            partition: s.partition.unwrap_or(1),
        };
        config.check()?;
        Ok(config)
    }

    fn check(&self) -> Result<()> {
        let sel = &self.selection;
        let bad = |what: &str| Err(CliError::Config(what.to_string()));
        if !(sel.zeta > 0.0 && sel.zeta < 1.0) {
            return bad("zeta must lie in (0, 1)");
        }
        if !(sel.tau > 0.0 && sel.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(sel.obj_tol > 0.0 && sel.grad_tol > 0.0) || sel.max_outer == 0 {
            return bad("tolerances and the iteration cap must be positive");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if self.partition == 0 {
            return bad("partition numbers start at 1");
        }
        if let PartitionSource::Stratified { nr, train_fraction, .. } = self.partitions {
            if nr == 0 || !(train_fraction > 0.0 && train_fraction < 1.0) {
                return bad("nr must be positive and train_frac in (0, 1)");
            }
        }
        Ok(())
    }

    /// Fully resolved settings; loading them back reproduces this config.
    pub fn to_settings(&self) -> Settings {
        let (partitions, nr, train_frac, seed) = match &self.partitions {
            PartitionSource::File(p) => (Some(p.clone()), None, None, None),
            PartitionSource::Stratified { nr, train_fraction, seed } => {
                (None, Some(*nr), Some(*train_fraction), Some(*seed))
            }
        };
        Settings {
            data: Some(self.data.clone()),
            label_col: Some(LabelCol(self.format.label_column).to_string()),
            header: Some(self.format.skip_header),
            positive_class: match self.format.labels {
                LabelEncoding::OneVsRest(c) => Some(c),
                _ => None,
            },
            partitions,
            nr,
            train_frac,
            seed,
            method: Some(self.method.name().to_string()),
            zeta: Some(self.selection.zeta),
            tau: Some(self.selection.tau),
            kernel: Some(match self.kernel {
                KernelMode::Ard => KernelChoice::Ard,
                KernelMode::Shared => KernelChoice::Shared,
            }),
            standardize: Some(self.standardize.into()),
            out: Some(self.out.clone()),
            workers: Some(self.workers),
            timing: Some(self.record_timing.into()),
            obj_tol: Some(self.selection.obj_tol),
            grad_tol: Some(self.selection.grad_tol),
            max_outer: Some(self.selection.max_outer),
            partition: Some(self.partition),
        }
    }

    pub fn echo(&self) -> String {
        toml::to_string(&self.to_settings()).unwrap_or_default()
    }
}
