//! Dataset files, partitions and feature standardization.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// n × D
    pub features: DMatrix<f64>,
    /// ±1
    pub labels: Vec<f64>,
    pub name: String,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, labels: Vec<f64>, name: impl Into<String>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Input(format!("{} rows but {} labels", features.nrows(), labels.len())));
        }
        if labels.is_empty() {
            return Err(Error::Input("dataset has no examples".into()));
        }
        if let Some(i) = labels.iter().position(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::Input(format!("label {i} is {} (expected ±1)", labels[i])));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite feature value".into()));
        }
        Ok(Dataset { features, labels, name: name.into() })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|&&v| v > 0.0).count()
    }

    /// Rows `indices` in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n()) {
            return Err(Error::Input(format!("index {bad} out of range for {} examples", self.n())));
        }
        let features = DMatrix::from_fn(indices.len(), self.dim(), |r, c| self.features[(indices[r], c)]);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Dataset { features, labels, name: self.name.clone() })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Delimiter {
    /// Comma if the line contains one, whitespace otherwise.
    #[default]
    Auto,
    Comma,
    Whitespace,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum LabelColumn {
    #[default]
    First,
    Last,
    /// 0-based column index.
    Index(usize),
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub enum LabelEncoding {
    /// {−1, +1} as is, or {0, 1} mapped to {−1, +1} when no −1 appears.
    #[default]
    Auto,
    PlusMinus,
    ZeroOne,
    /// Multiclass labels; this class is positive, the rest negative.
    OneVsRest(f64),
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FormatOptions {
    pub delimiter: Delimiter,
    pub label_column: LabelColumn,
    pub labels: LabelEncoding,
    pub skip_header: bool,
}

fn split_fields(line: &str, delimiter: Delimiter) -> Vec<&str> {
    let comma = match delimiter {
        Delimiter::Comma => true,
        Delimiter::Whitespace => false,
        Delimiter::Auto => line.contains(','),
    };
    if comma {
        line.split(',').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    }
}

/// Parse delimited numeric text. Blank lines and lines starting with `#`
/// are ignored.
pub fn parse_dataset(text: &str, name: &str, opts: &FormatOptions) -> Result<Dataset> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels = Vec::new();
    let mut width = None;
    let mut skipped_header = !opts.skip_header;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if !skipped_header {
            skipped_header = true;
            continue;
        }
        let fields = split_fields(trimmed, opts.delimiter);
        if *width.get_or_insert(fields.len()) != fields.len() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} fields, found {}", width.unwrap_or(0), fields.len()),
            });
        }
        if fields.len() < 2 {
            return Err(Error::Parse { line: line_no, message: "need a label and at least one feature".into() });
        }
        let label_at = match opts.label_column {
            LabelColumn::First => 0,
            LabelColumn::Last => fields.len() - 1,
            LabelColumn::Index(i) if i < fields.len() => i,
            LabelColumn::Index(i) => {
                return Err(Error::Parse { line: line_no, message: format!("no column {i}") });
            }
        };
        let mut row = Vec::with_capacity(fields.len() - 1);
        for (c, field) in fields.iter().enumerate() {
            let value: f64 = field.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("non-numeric field '{field}'"),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse { line: line_no, message: format!("non-finite field '{field}'") });
            }
            if c == label_at {
                raw_labels.push((line_no, value));
            } else {
                row.push(value);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Input(format!("{name}: no examples")));
    }
    let zero_one = match opts.labels {
        LabelEncoding::ZeroOne => true,
        LabelEncoding::PlusMinus => false,
        LabelEncoding::Auto => raw_labels.iter().all(|&(_, v)| v == 0.0 || v == 1.0),
        LabelEncoding::OneVsRest(positive) => {
            let raw: Vec<f64> = raw_labels.iter().map(|&(_, v)| v).collect();
            let labels = binarize_multiclass(&raw, &positive)?;
            let d = rows[0].len();
            let features = DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c]);
            return Dataset::new(features, labels, name);
        }
    };
    let labels = raw_labels
        .iter()
        .map(|&(line, v)| match (zero_one, v) {
            (true, 0.0) => Ok(-1.0),
            (true, 1.0) | (false, 1.0) => Ok(1.0),
            (false, -1.0) => Ok(-1.0),
            _ => Err(Error::Parse { line, message: format!("unknown label {v}") }),
        })
        .collect::<Result<Vec<f64>>>()?;
    let d = rows[0].len();
    let features = DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c]);
    Dataset::new(features, labels, name)
}

pub fn load_dataset(path: impl AsRef<Path>, opts: &FormatOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_dataset(&text, &name, opts)
}

/// Comma-separated text with the label first; `load_dataset` with default
/// options reads it back exactly.
pub fn format_dataset(data: &Dataset) -> String {
    let mut out = String::new();
    for r in 0..data.n() {
        write!(out, "{}", data.labels[r]).unwrap();
        for c in 0..data.dim() {
            write!(out, ",{}", data.features[(r, c)]).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    std::fs::write(path, format_dataset(data))?;
    Ok(())
}

/// Matching class ↦ +1, every other class ↦ −1.
pub fn binarize_multiclass<T: PartialEq + std::fmt::Debug>(raw: &[T], positive: &T) -> Result<Vec<f64>> {
    if !raw.contains(positive) {
        return Err(Error::Input(format!("class {positive:?} does not occur")));
    }
    Ok(raw.iter().map(|v| if v == positive { 1.0 } else { -1.0 }).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionSet {
    pub splits: Vec<Split>,
}

impl PartitionSet {
    pub fn count(&self) -> usize {
        self.splits.len()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for (s, split) in self.splits.iter().enumerate() {
            let mut seen = vec![false; n];
            for &i in split.train.iter().chain(&split.test) {
                if i >= n {
                    return Err(Error::Input(format!("split {s}: index {} out of range", i + 1)));
                }
                if seen[i] {
                    return Err(Error::Input(format!("split {s}: index {} repeated", i + 1)));
                }
                seen[i] = true;
            }
            if split.train.is_empty() || split.test.is_empty() {
                return Err(Error::Input(format!("split {s} has an empty side")));
            }
        }
        Ok(())
    }
}

/// Random train/test splits that keep each class's share of the training
/// set at round(train_fraction · class size).
pub fn stratified_partitions(labels: &[f64], nr: usize, train_fraction: f64, seed: u64) -> Result<PartitionSet> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Input(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] > 0.0).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] <= 0.0).collect();
    if pos.len() < 2 || neg.len() < 2 {
        return Err(Error::Input(format!(
            "stratification needs at least 2 examples per class ({} positive, {} negative)",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let splits = (0..nr)
        .map(|_| {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for class in [&pos, &neg] {
                let mut idx = class.clone();
                idx.shuffle(&mut rng);
                let k = ((train_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
                train.extend_from_slice(&idx[..k]);
                test.extend_from_slice(&idx[k..]);
            }
            train.sort_unstable();
            test.sort_unstable();
            Split { train, test }
        })
        .collect();
    Ok(PartitionSet { splits })
}

/// One "train: …" and one "test: …" line per split, 1-based indices.
pub fn format_partitions(set: &PartitionSet) -> String {
    let mut out = String::new();
    for split in &set.splits {
        for (tag, idx) in [("train", &split.train), ("test", &split.test)] {
            out.push_str(tag);
            out.push(':');
            for i in idx.iter() {
                write!(out, " {}", i + 1).unwrap();
            }
            out.push('\n');
        }
    }
    out
}

pub fn parse_partitions(text: &str, n: usize) -> Result<PartitionSet> {
    let mut splits = Vec::new();
    let mut pending: Option<Vec<usize>> = None;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (tag, rest) = trimmed
            .split_once(':')
            .ok_or_else(|| Error::Parse { line: line_no, message: "expected 'train:' or 'test:'".into() })?;
        let indices = rest
            .split_whitespace()
            .map(|t| match t.parse::<usize>() {
                Ok(i) if i >= 1 => Ok(i - 1),
                _ => Err(Error::Parse { line: line_no, message: format!("bad index '{t}'") }),
            })
            .collect::<Result<Vec<usize>>>()?;
        match (tag.trim(), pending.take()) {
            ("train", None) => pending = Some(indices),
            ("test", Some(train)) => splits.push(Split { train, test: indices }),
            (other, _) => {
                return Err(Error::Parse { line: line_no, message: format!("unexpected '{other}:' line") });
            }
        }
    }
    if pending.is_some() {
        return Err(Error::Parse { line: text.lines().count(), message: "train line without test line".into() });
    }
    let set = PartitionSet { splits };
    set.validate(n)?;
    Ok(set)
}

pub fn read_partitions(path: impl AsRef<Path>, n: usize) -> Result<PartitionSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_partitions(&text, n)
}

pub fn write_partitions(path: impl AsRef<Path>, set: &PartitionSet) -> Result<()> {
    std::fs::write(path, format_partitions(set))?;
    Ok(())
}

/// Per-feature affine map fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Mean and population standard deviation of each column; constant
    /// columns get scale 1.
    pub fn fit(train: &DMatrix<f64>) -> Self {
        let n = train.nrows().max(1) as f64;
        let mut mean = Vec::with_capacity(train.ncols());
        let mut scale = Vec::with_capacity(train.ncols());
        for col in train.column_iter() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let sd = var.sqrt();
            mean.push(m);
            scale.push(if sd > 1e-12 * m.abs().max(1.0) { sd } else { 1.0 });
        }
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::Input(format!("{} features, expected {}", x.ncols(), self.mean.len())));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| (x[(r, c)] - self.mean[c]) / self.scale[c]))
    }
}

/// Standardize both sets with statistics from `train` only.
pub fn standardize(train: &DMatrix<f64>, test: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>, Standardizer)> {
    let st = Standardizer::fit(train);
    Ok((st.apply(train)?, st.apply(test)?, st))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_label_first() {
        let d = parse_dataset("1, 0.5, 0.3\n-1, 0.1, 0.9\n", "t", &FormatOptions::default()).unwrap();
        assert_eq!((d.n(), d.dim()), (2, 2));
        assert_eq!(d.labels, vec![1.0, -1.0]);
        assert_eq!(d.features[(1, 1)], 0.9);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = parse_dataset("1,2,3\n-1,x,3\n", "t", &FormatOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_dataset("1,2,3\n-1,3\n", "t", &FormatOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = parse_dataset("1,2\n2,3\n", "t", &FormatOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn zero_one_labels_and_other_layouts() {
        let d = parse_dataset("0 0.5\n1 0.7\n", "t", &FormatOptions::default()).unwrap();
        assert_eq!(d.labels, vec![-1.0, 1.0]);
        let opts = FormatOptions { label_column: LabelColumn::Last, skip_header: true, ..Default::default() };
        let d = parse_dataset("a,b,y\n0.5,2,1\n0.7,3,-1\n", "t", &opts).unwrap();
        assert_eq!(d.labels, vec![1.0, -1.0]);
        assert_eq!(d.features[(1, 1)], 3.0);
        let strict = FormatOptions { labels: LabelEncoding::PlusMinus, ..Default::default() };
        assert!(parse_dataset("0 0.5\n1 0.7\n", "t", &strict).is_err());
        let ovr = FormatOptions { labels: LabelEncoding::OneVsRest(3.0), ..Default::default() };
        let d = parse_dataset("3 0.5\n1 0.7\n2 0.1\n", "t", &ovr).unwrap();
        assert_eq!(d.labels, vec![1.0, -1.0, -1.0]);
    }

    #[test]
    fn binarize() {
        assert_eq!(binarize_multiclass(&[7, 2, 7, 3], &7).unwrap(), vec![1.0, -1.0, 1.0, -1.0]);
        assert_eq!(binarize_multiclass(&[4, 4], &4).unwrap(), vec![1.0, 1.0]);
        assert!(binarize_multiclass(&[1, 2], &5).is_err());
    }

    #[test]
    fn stratified_counts() {
        let labels: Vec<f64> = (0..100).map(|i| if i < 10 { 1.0 } else { -1.0 }).collect();
        let set = stratified_partitions(&labels, 5, 0.5, 3).unwrap();
        for s in &set.splits {
            assert_eq!(s.train.iter().filter(|&&i| i < 10).count(), 5);
            assert_eq!(s.train.len(), 50);
        }
        assert_eq!(set, stratified_partitions(&labels, 5, 0.5, 3).unwrap());
        assert_ne!(set, stratified_partitions(&labels, 5, 0.5, 4).unwrap());
        let mut few = labels.clone();
        few[1..10].iter_mut().for_each(|v| *v = -1.0);
        assert!(stratified_partitions(&few, 1, 0.5, 0).is_err());
    }

    #[test]
    fn many_distinct_splits() {
        let labels: Vec<f64> = (0..300).map(|i| if i % 40 == 0 { 1.0 } else { -1.0 }).collect();
        let set = stratified_partitions(&labels, 50, 0.2, 9).unwrap();
        let mut trains: Vec<&Vec<usize>> = set.splits.iter().map(|s| &s.train).collect();
        trains.sort();
        trains.dedup();
        assert_eq!(trains.len(), 50);
    }

    #[test]
    fn partition_file_round_trip() {
        let labels: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect();
        let set = stratified_partitions(&labels, 3, 0.5, 1).unwrap();
        let text = format_partitions(&set);
        assert!(text.starts_with("train: "));
        assert_eq!(parse_partitions(&text, 12).unwrap(), set);
        assert!(parse_partitions("train: 1 2\ntest: 2 3\n", 5).is_err());
        assert!(parse_partitions("train: 1 2\ntest: 9\n", 5).is_err());
        assert!(parse_partitions("test: 1\n", 5).is_err());
    }

    #[test]
    fn standardization_examples() {
        let train = DMatrix::from_row_slice(2, 2, &[0.0, 5.0, 2.0, 5.0]);
        let test = DMatrix::from_row_slice(1, 2, &[1.0, 7.0]);
        let (a, b, st) = standardize(&train, &test).unwrap();
        assert_eq!(a.column(0).as_slice(), &[-1.0, 1.0]);
        assert_eq!(a.column(1).as_slice(), &[0.0, 0.0]);
        assert_eq!(st.scale[1], 1.0);
        assert_eq!(b[(0, 0)], 0.0);
        assert_eq!(b[(0, 1)], 2.0);
    }

    proptest! {
        #[test]
        fn dataset_round_trip(
            rows in proptest::collection::vec((any::<bool>(), proptest::collection::vec(-1e6f64..1e6, 3)), 1..10)
        ) {
            let n = rows.len();
            let features = DMatrix::from_fn(n, 3, |r, c| rows[r].1[c]);
            let labels = rows.iter().map(|(l, _)| if *l { 1.0 } else { -1.0 }).collect();
            let d = Dataset::new(features, labels, "rt").unwrap();
            let back = parse_dataset(&format_dataset(&d), "rt", &FormatOptions::default()).unwrap();
            prop_assert_eq!(back, d);
        }

        #[test]
        fn stratification_tracks_proportions(n_pos in 2usize..30, n_neg in 2usize..60, frac in 0.1f64..0.9, seed in 0u64..100) {
            let labels: Vec<f64> = (0..n_pos + n_neg).map(|i| if i < n_pos { 1.0 } else { -1.0 }).collect();
            let set = stratified_partitions(&labels, 3, frac, seed).unwrap();
            set.validate(labels.len()).unwrap();
            for s in &set.splits {
                let got = s.train.iter().filter(|&&i| i < n_pos).count() as f64;
                prop_assert!((got - frac * n_pos as f64).abs() <= 1.0);
                prop_assert_eq!(s.train.len() + s.test.len(), labels.len());
            }
        }

        #[test]
        fn test_rows_do_not_leak(
            train in proptest::collection::vec(-5.0f64..5.0, 6),
            test in proptest::collection::vec(-5.0f64..5.0, 4),
            other in proptest::collection::vec(-50.0f64..50.0, 4),
        ) {
            let tr = DMatrix::from_row_slice(3, 2, &train);
            let (_, _, a) = standardize(&tr, &DMatrix::from_row_slice(2, 2, &test)).unwrap();
            let (_, _, b) = standardize(&tr, &DMatrix::from_row_slice(2, 2, &other)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
