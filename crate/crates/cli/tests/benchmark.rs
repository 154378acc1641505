use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use epcv_cli::config::Switch;
use epcv_cli::run::{mean_std, run_benchmark, run_fit, run_trace, SUMMARY_COLUMNS};
use epcv_cli::{RunConfig, Settings};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use tempfile::TempDir;

/// Four Gaussian features; positives shifted along the first two.
fn write_imbalanced(dir: &Path, seed: u64, n: usize, n_pos: usize, shift: f64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut text = String::new();
    for i in 0..n {
        let positive = i < n_pos;
        let mut row = vec![if positive { "1".to_string() } else { "-1".to_string() }];
        for k in 0..4 {
            let offset = match (positive, k) {
                (true, 0) => shift,
                (true, 1) => 0.5 * shift,
                _ => 0.0,
            };
            row.push(format!("{:.6}", normal.sample(&mut rng) + offset));
        }
        text.push_str(&row.join(","));
        text.push('\n');
    }
    let path = dir.join(format!("imbalanced_{seed}.csv"));
    fs::write(&path, text).unwrap();
    path
}

fn settings(data: &Path, out: &Path, method: &str, nr: usize) -> Settings {
    Settings {
        data: Some(data.to_path_buf()),
        out: Some(out.to_path_buf()),
        method: Some(method.into()),
        nr: Some(nr),
        train_frac: Some(0.5),
        timing: Some(Switch::Off),
        ..Settings::default()
    }
}

fn read_table(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

#[test]
fn single_partition_summary_equals_its_row() {
    let dir = TempDir::new().unwrap();
    let data = write_imbalanced(dir.path(), 3, 40, 12, 2.0);
    let out = dir.path().join("out");
    let cfg = RunConfig::from_settings(&settings(&data, &out, "LS_CV_NLP", 1)).unwrap();
    let report = run_benchmark(&cfg).unwrap();
    assert_eq!(report.failed(), 0);
    let (ph, rows) = read_table(&out.join("partitions.csv"));
    let (sh, summary) = read_table(&out.join("summary.csv"));
    assert_eq!((rows.len(), summary.len()), (1, 1));
    for (name, _) in SUMMARY_COLUMNS {
        let row: f64 = rows[0][column(&ph, name)].parse().unwrap();
        let mean: f64 = summary[0][column(&sh, &format!("{name}_mean"))].parse().unwrap();
        let std: f64 = summary[0][column(&sh, &format!("{name}_std"))].parse().unwrap();
        assert_eq!(mean, row, "{name}");
        assert_eq!(std, 0.0, "{name}");
    }
}

#[test]
fn repeated_runs_are_byte_identical_and_summaries_recompute() {
    let dir = TempDir::new().unwrap();
    let data = write_imbalanced(dir.path(), 5, 60, 15, 1.5);
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("run{run}"));
        let mut s = settings(&data, &out, "EP_CV_NLP", 4);
        s.workers = Some(run + 1);
        run_benchmark(&RunConfig::from_settings(&s).unwrap()).unwrap();
        outputs.push(out);
    }
    for file in ["partitions.csv", "summary.csv"] {
        let a = fs::read(outputs[0].join(file)).unwrap();
        let b = fs::read(outputs[1].join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between runs");
        assert!(!a.contains(&b'\r'));
    }

    let (ph, rows) = read_table(&outputs[0].join("partitions.csv"));
    let (sh, summary) = read_table(&outputs[0].join("summary.csv"));
    assert_eq!(rows.len(), 4);
    let order: Vec<String> = rows.iter().map(|r| r[0].clone()).collect();
    assert_eq!(order, ["1", "2", "3", "4"]);
    for (name, _) in SUMMARY_COLUMNS {
        let values: Vec<f64> = rows.iter().filter_map(|r| r[column(&ph, name)].parse().ok()).collect();
        let stat = mean_std(&values).unwrap();
        let mean: f64 = summary[0][column(&sh, &format!("{name}_mean"))].parse().unwrap();
        let std: f64 = summary[0][column(&sh, &format!("{name}_std"))].parse().unwrap();
        assert!((stat.mean - mean).abs() <= 1e-9, "{name} mean");
        assert!((stat.std - std).abs() <= 1e-9, "{name} std");
    }
}

#[test]
fn hundred_partitions_give_hundred_rows() {
    let heart = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/heart.csv");
    let dir = TempDir::new().unwrap();
    let mut s = settings(&heart, dir.path(), "EP_CV_NLP", 100);
    s.train_frac = Some(170.0 / 270.0);
    s.max_outer = Some(1);
    let report = run_benchmark(&RunConfig::from_settings(&s).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 100);
    let (_, rows) = read_table(&dir.path().join("partitions.csv"));
    assert_eq!(rows.len(), 100);
}

#[test]
fn trace_rows_match_iterations() {
    let dir = TempDir::new().unwrap();
    let data = write_imbalanced(dir.path(), 7, 80, 10, 2.0);
    let mut s = settings(&data, dir.path(), "EP_CV_FM", 2);
    s.partition = Some(2);
    let result = run_trace(&RunConfig::from_settings(&s).unwrap()).unwrap();
    let (header, rows) = read_table(&dir.path().join("trace.csv"));
    assert_eq!(&header[..5], ["iter", "smoothed_metric", "true_loo_metric", "objective", "grad_norm"]);
    assert_eq!(rows.len(), result.iterations());
    let smoothed: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(smoothed.windows(2).all(|w| w[1] >= w[0] - 1e-10), "{smoothed:?}");
}

#[test]
fn fit_writes_one_prediction_per_test_row() {
    let dir = TempDir::new().unwrap();
    let data = write_imbalanced(dir.path(), 9, 50, 20, 2.0);
    let report = run_fit(&RunConfig::from_settings(&settings(&data, dir.path(), "EP_ML", 1)).unwrap()).unwrap();
    let (_, preds) = read_table(&dir.path().join("predictions.csv"));
    assert_eq!(preds.len(), 25);
    assert!(preds.iter().all(|r| (0.0..=1.0).contains(&r[4].parse::<f64>().unwrap())));
    assert!(report.scores.test_error < 0.5);
}

fn epcv() -> Command {
    Command::new(env!("CARGO_BIN_EXE_epcv"))
}

#[test]
fn flags_override_the_config_file() {
    let dir = TempDir::new().unwrap();
    let data = write_imbalanced(dir.path(), 11, 40, 10, 2.0);
    let out = dir.path().join("out");
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        format!("data = {:?}\nmethod = \"EP_CV_FM\"\nnr = 3\nmax_outer = 2\nkernel = \"ard\"\n", data.display().to_string()),
    )
    .unwrap();
    let status = epcv()
        .args(["benchmark", "--config"])
        .arg(&config)
        .args(["--nr", "2", "--no-timing", "--out"])
        .arg(&out)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let (_, rows) = read_table(&out.join("partitions.csv"));
    assert_eq!(rows.len(), 2);
    let echo = Settings::parse(&fs::read_to_string(out.join("config.txt")).unwrap()).unwrap();
    assert_eq!(echo.method.as_deref(), Some("EP_CV_FM"));
    assert_eq!(echo.nr, Some(2));
    assert_eq!(echo.max_outer, Some(2));
}

#[test]
fn bad_input_is_reported_not_panicked() {
    let dir = TempDir::new().unwrap();
    let out = epcv().args(["benchmark", "--data"]).arg(dir.path().join("missing.csv")).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));
    let config = dir.path().join("bad.toml");
    fs::write(&config, "nonsense = 1\n").unwrap();
    let out = epcv().args(["fit", "--config"]).arg(&config).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn failing_partitions_set_the_exit_status() {
    let dir = TempDir::new().unwrap();
    let data = write_imbalanced(dir.path(), 13, 20, 5, 2.0);
    // Two of ten splits train on negatives only, which the F criterion rejects.
    let mut parts = String::new();
    for p in 0..10 {
        let train: Vec<usize> = if p < 2 { (6..=15).collect() } else { (1..=3).chain(6..=12).collect() };
        let test: Vec<usize> = (1..=20).filter(|i| !train.contains(i)).collect();
        let join = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
        parts.push_str(&format!("train: {}\ntest: {}\n", join(&train), join(&test)));
    }
    let part_file = dir.path().join("parts.txt");
    fs::write(&part_file, parts).unwrap();
    let out_dir = dir.path().join("out");
    let status = epcv()
        .args(["benchmark", "--method", "EP_CV_FM", "--max-outer", "2", "--data"])
        .arg(&data)
        .arg("--partitions")
        .arg(&part_file)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap()
        .status;
    assert!(!status.success());
    let (header, rows) = read_table(&out_dir.join("partitions.csv"));
    let status_col = column(&header, "status");
    let failed: Vec<&str> = rows.iter().map(|r| r[status_col].as_str()).collect();
    assert_eq!(failed.iter().filter(|s| **s == "failed").count(), 2);
    assert_eq!(rows.len(), 10);
}

/// One-sided sign test: P(X ≥ wins) for X ~ Binomial(wins + losses, ½).
fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = wins + losses;
    let choose = |k: usize| (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    (wins..=n).map(choose).sum::<f64>() / 2f64.powi(n as i32)
}

#[test]
fn sign_test_reference_values() {
    assert!((sign_test(15, 2) - 154.0 / 131072.0).abs() < 1e-15);
    assert!((sign_test(10, 0) - 1.0 / 1024.0).abs() < 1e-15);
}

#[test]
fn fmeasure_criterion_beats_nlp_on_imbalanced_data() {
    let dir = TempDir::new().unwrap();
    let data = write_imbalanced(dir.path(), 1, 400, 20, 1.5);
    let f_scores = |method: &str| {
        let out = dir.path().join(method);
        let report = run_benchmark(&RunConfig::from_settings(&settings(&data, &out, method, 20)).unwrap()).unwrap();
        assert_eq!(report.failed(), 0);
        report.scores().map(|s| s.test_f.unwrap_or(0.0)).collect::<Vec<f64>>()
    };
    let nlp = f_scores("EP_CV_NLP");
    let fm = f_scores("EP_CV_FM");
    let wins = nlp.iter().zip(&fm).filter(|(a, b)| b > a).count();
    let losses = nlp.iter().zip(&fm).filter(|(a, b)| b < a).count();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("F mean: NLP {:.4} FM {:.4}; FM wins {wins}, loses {losses}", mean(&nlp), mean(&fm));
    assert!(mean(&fm) > mean(&nlp));
    assert!(sign_test(wins, losses) < 0.05, "p = {}", sign_test(wins, losses));
}
