use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use harpe_core::eval::EvalReport;
use harpe_core::experiment::{read_json, BasesFile};

fn harpe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_harpe"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = harpe(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn single_head_search_returns_b_min() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bases.json");
    ok(&[
        "search-bases", "--b-min", "1000000", "--b-max", "5000000", "--stride", "30000",
        "--heads", "1", "--head-dim", "128", "--out", p(&out),
    ]);
    let file: BasesFile = read_json(&out).unwrap();
    assert_eq!(file.bases, vec![1e6]);
    assert_eq!(file.selection_order, vec![1e6]);
}

#[test]
fn uniform_mode_spaces_bases_evenly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested/bases.json");
    ok(&[
        "search-bases", "--mode", "uniform", "--b-min", "1e6", "--b-max", "5e6",
        "--heads", "5", "--head-dim", "16", "--out", p(&out),
    ]);
    let file: BasesFile = read_json(&out).unwrap();
    assert_eq!(file.bases, vec![1e6, 2e6, 3e6, 4e6, 5e6]);
}

#[test]
fn searched_bases_are_distinct_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bases.json");
    ok(&[
        "search-bases", "--b-min", "1e6", "--b-max", "5e6", "--stride", "3e4", "--heads", "32",
        "--head-dim", "128", "--max-distance", "8192", "--out", p(&out),
    ]);
    let file: BasesFile = read_json(&out).unwrap();
    assert_eq!(file.selection_order[0], 1e6);
    let mut sorted = file.selection_order.clone();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    assert_eq!(sorted, file.bases);
    assert_eq!(file.bases.len(), 32);
    assert!(file.bases.iter().all(|&b| (1e6..=4.99e6).contains(&b)));
}

#[test]
fn search_without_enough_candidates_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = harpe(&[
        "search-bases", "--b-min", "1e6", "--b-max", "2e6", "--stride", "1e6", "--heads", "4",
        "--head-dim", "16", "--out", p(&dir.path().join("b.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn waveform_csv_marks_extrema() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("w.csv");
    ok(&[
        "inspect-waveform", "--base", "10000", "--head-dim", "2", "--max-distance", "10",
        "--out", p(&out),
    ]);
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(text.lines().next(), Some("distance,value,is_peak,is_valley"));
    assert_eq!(rows.len(), 11);
    assert_eq!(rows[0][1].parse::<f64>().unwrap(), 1.0);
    let flagged = |col: usize| -> Vec<usize> {
        rows.iter()
            .filter(|r| r[col] == "true")
            .map(|r| r[0].parse().unwrap())
            .collect()
    };
    // cos(s) on 0..=10
    assert_eq!(flagged(2), vec![6]);
    assert_eq!(flagged(3), vec![3, 9]);
}

const TINY: &str = r#"{
    "schema_version": 1,
    "name": "tiny",
    "seed": 5,
    "model": {"width": 16, "n_layers": 1, "n_heads": 2, "max_context": 128},
    "schedule": {"stages": [
        {"strategy": {"strategy": "abf", "base": 10000}, "context_len": 32, "tokens": 512, "learning_rate": 0.003},
        {"strategy": {"strategy": "harpe", "search": {"mode": "uniform", "b_min": 10000, "b_max": 40000}},
         "context_len": 64, "tokens": 512, "learning_rate": 0.003}
    ], "batch_size": 2, "warmup_steps": 2},
    "corpus": {"kind": "niah"}
}"#;

fn train_and_eval(dir: &Path, config: &Path) -> Vec<(String, Vec<u8>)> {
    let run = dir.join("run");
    ok(&["train", "--config", p(config), "--out", p(&run)]);
    let ckpt = run.join("model.ckpt");
    ok(&[
        "eval-niah", "--ckpt", p(&ckpt), "--tasks", "niah_single_1,niah_multiquery",
        "--lengths", "64,128", "--seeds", "2", "--out", p(&dir.join("niah.csv")),
    ]);
    ok(&[
        "eval-ppl", "--ckpt", p(&ckpt), "--corpus-spec", r#"{"kind": "markov"}"#, "--window", "16",
        "--context", "64", "--tokens", "200", "--out", p(&dir.join("ppl.json")),
    ]);
    let mut files: Vec<PathBuf> = fs::read_dir(&run).unwrap().map(|e| e.unwrap().path()).collect();
    files.extend(["niah.csv", "niah.json", "ppl.json"].map(|f| dir.join(f)));
    let mut named: Vec<(String, Vec<u8>)> = files
        .into_iter()
        .map(|f| (f.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&f).unwrap()))
        .collect();
    named.sort();
    named
}

#[test]
fn train_and_eval_are_byte_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("tiny.json");
    fs::write(&config, TINY).unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    let first = train_and_eval(&a, &config);
    let second = train_and_eval(&b, &config);
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        ["losses.csv", "model.ckpt", "niah.csv", "niah.json", "ppl.json", "resolved_schedule.json", "summary.json"]
    );
    assert_eq!(first, second);

    let losses = String::from_utf8(first[0].1.clone()).unwrap();
    // 512 / (2 * 32) + 512 / (2 * 64) steps
    assert_eq!(losses.lines().count(), 1 + 8 + 4);

    // a different seed changes the weights
    let c = root.path().join("c");
    ok(&["train", "--config", p(&config), "--out", p(&c), "--seed", "6"]);
    assert_ne!(fs::read(c.join("model.ckpt")).unwrap(), first[1].1);
}

#[test]
fn compare_joins_reports_into_one_grid() {
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("tiny.json");
    fs::write(&config, TINY).unwrap();
    let run = root.path().join("run");
    ok(&["train", "--config", p(&config), "--out", p(&run)]);
    let ckpt = run.join("model.ckpt");
    let mut reports = Vec::new();
    for (i, label) in ["first", "second", "third"].iter().enumerate() {
        let csv = root.path().join(format!("r{i}.csv"));
        ok(&[
            "eval-niah", "--ckpt", p(&ckpt), "--tasks", "niah_single_1", "--lengths", "64,96",
            "--seeds", "1", "--seed", &i.to_string(), "--label", label, "--out", p(&csv),
        ]);
        reports.push(csv.with_extension("json"));
    }
    let report: EvalReport = read_json(&reports[0]).unwrap();
    assert_eq!(report.meta.label, "first");
    assert_eq!(report.lengths, vec![64, 96]);

    let grid = root.path().join("grid.csv");
    let mut args = vec!["compare"];
    args.extend(reports.iter().map(|r| p(r)));
    args.extend(["--out", p(&grid)]);
    let out = ok(&args);
    let csv = fs::read_to_string(&grid).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,64,96,avg");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("third,"));
    let table = fs::read_to_string(grid.with_extension("txt")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), table);

    let empty = harpe(&["compare", "--out", p(&root.path().join("none.csv"))]);
    assert_eq!(empty.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(harpe(&["search-bases", "--bogus"]).status.code(), Some(1));
    assert_eq!(harpe(&[]).status.code(), Some(1));
    assert_eq!(harpe(&["--help"]).status.code(), Some(0));
    let bad_threads = Command::new(env!("CARGO_BIN_EXE_harpe"))
        .args(["--version"])
        .env("HARPE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad_threads.status.code(), Some(0));
    let bad_threads = Command::new(env!("CARGO_BIN_EXE_harpe"))
        .args(["inspect-waveform", "--base", "1e4", "--head-dim", "2", "--max-distance", "4", "--out", "/dev/null"])
        .env("HARPE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad_threads.status.code(), Some(1));
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = harpe(&[
        "eval-niah", "--ckpt", p(&dir.path().join("absent.ckpt")), "--out", p(&dir.path().join("x.csv")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.ckpt"));
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    fs::write(&config, TINY.replace(r#""n_heads": 2"#, r#""n_heads": "two""#)).unwrap();
    let out = harpe(&["train", "--config", p(&config), "--out", p(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model.n_heads"), "{err}");
}
