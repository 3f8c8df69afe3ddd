//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! The trend experiment (criteria 9 and 10) trains three 4-layer models on
//! 20M tokens each, which takes hours on one core. It runs only when
//! `HARPE_ACCEPT_TREND=1`; `HARPE_ACCEPT_TREND_TOKENS` overrides the budget.
//! Without it criterion 9 reports SKIP and criterion 10 runs the same
//! pipeline at a tiny budget.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use harpe_core::attention::{attention_forward, AttentionConfig, HeadOrder, PositionalStrategy};
use harpe_core::bases::{
    candidate_bases, extract_extrema, search_with_extrema, uniform_bases, BaseSet,
};
use harpe_core::corpus::CorpusSpec;
use harpe_core::eval::niah::NiahTask;
use harpe_core::eval::{
    comparison_csv, comparison_table, run_eval_matrix, sliding_window_ppl, EvalEntry, EvalGrid,
    OracleAnswerer, RandomAnswerer, ReportMeta,
};
use harpe_core::experiment::{
    eval_niah, eval_ppl, niah_seeds, to_json, trend_experiments, write_train_outputs,
    BaseSearchParams, PplSpec, SearchMode,
};
use harpe_core::model::{init_model, run_schedule, ModelConfig, Params, Stage, TrainSchedule, Transformer};
use harpe_core::rope::{compute_theta, pairwise_logit, rotate, RotaryVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    status: Status,
    detail: String,
}

#[derive(PartialEq)]
enum Status {
    Pass,
    Fail,
    Skip,
}

fn check(ok: bool, detail: String) -> Outcome {
    Outcome {
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rope_correctness() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut max_dev = 0.0f64;
    let mut max_norm = 0.0f64;
    for d in [2usize, 16, 128] {
        for _ in 0..1000 {
            let base = 10f64.powf(rng.random_range(2.0..7.0));
            let angles = compute_theta(base, d).unwrap();
            let (qv, kv) = (randn(&mut rng, d), randn(&mut rng, d));
            let m = rng.random_range(0..8192) as f64;
            let n = rng.random_range(0..8192) as f64;
            let delta = rng.random_range(0..8192) as f64;
            let a = pairwise_logit(
                &RotaryVector::new(qv.clone(), m),
                &RotaryVector::new(kv.clone(), n),
                &angles,
            )
            .unwrap();
            let b = pairwise_logit(
                &RotaryVector::new(qv.clone(), m + delta),
                &RotaryVector::new(kv, n + delta),
                &angles,
            )
            .unwrap();
            max_dev = max_dev.max((a - b).abs());
            let r = rotate(&RotaryVector::new(qv.clone(), m), &angles).unwrap();
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            max_norm = max_norm.max((norm(&r) - norm(&qv)).abs() / norm(&qv));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        max_dev < 1e-9 && max_norm < 1e-12 && secs < 5.0,
        format!(
            "translation dev {max_dev:.2e} (< 1e-9), norm dev {max_norm:.2e} (< 1e-12), {secs:.2} s (< 5 s)"
        ),
    )
}

fn degenerate_harpe() -> Outcome {
    let t0 = Instant::now();
    let (seq, heads, d) = (256, 4, 16);
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = 10f64.powf(rng.random_range(3.0..6.0));
        let mut mats = || -> Vec<Array2<f64>> {
            (0..heads)
                .map(|_| Array2::from_shape_vec((seq, d), randn(&mut rng, seq * d)).unwrap())
                .collect()
        };
        let (q, k, v) = (mats(), mats(), mats());
        let vanilla = AttentionConfig::new(heads, d, seq, PositionalStrategy::Vanilla { base }).unwrap();
        let harpe = AttentionConfig::new(
            heads,
            d,
            seq,
            PositionalStrategy::Harpe {
                bases: BaseSet::explicit(vec![base; heads]).unwrap(),
                order: HeadOrder::Ascending,
            },
        )
        .unwrap();
        let a = attention_forward(&q, &k, &v, &vanilla).unwrap();
        let b = attention_forward(&q, &k, &v, &harpe).unwrap();
        for (x, y) in a.outputs.iter().zip(&b.outputs) {
            worst = x.iter().zip(y).fold(worst, |w, (p, q)| w.max((p - q).abs()));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst < 1e-6 && secs < 30.0,
        format!("max-abs diff {worst:.2e} (< 1e-6) over 100 seeds, {secs:.2} s (< 30 s)"),
    )
}

fn base_algebra() -> Outcome {
    let u = uniform_bases(1e6, 5e6, 5).unwrap();
    let u_ok = u.bases() == [1e6, 2e6, 3e6, 4e6, 5e6];
    let c = candidate_bases(1e6, 5e6, 3e4).unwrap();
    let c = c.bases();
    let c_ok = c.len() == 133 && c[0] == 1.03e6 && c[132] == 4.99e6;
    check(
        u_ok && c_ok,
        format!(
            "uniform {:?}; candidates n={} first={} last={}",
            u.bases(),
            c.len(),
            c[0],
            c[c.len() - 1]
        ),
    )
}

/// Independent extremum scan used by the brute-force oracle.
fn oracle_extrema(values: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let mut peaks = Vec::new();
    let mut valleys = Vec::new();
    for i in 1..values.len() - 1 {
        if values[i] > values[i - 1] && values[i] > values[i + 1] {
            peaks.push(i);
        }
        if values[i] < values[i - 1] && values[i] < values[i + 1] {
            valleys.push(i);
        }
    }
    (peaks, valleys)
}

/// Greedy selection by exhaustive scoring: every candidate extremum is
/// compared against every accumulated opposite extremum.
fn oracle_greedy(seed_base: f64, seed_values: &[f64], pool: &[(f64, Vec<f64>)], n: usize) -> Vec<f64> {
    let (mut acc_p, mut acc_v) = oracle_extrema(seed_values);
    let mut remaining: Vec<(f64, Vec<usize>, Vec<usize>)> = pool
        .iter()
        .map(|(b, vals)| {
            let (p, v) = oracle_extrema(vals);
            (*b, p, v)
        })
        .filter(|(_, p, v)| !p.is_empty() && !v.is_empty())
        .collect();
    let mut out = vec![seed_base];
    while out.len() < n {
        let mut best: Option<(u64, f64, usize)> = None;
        for (i, (b, p, v)) in remaining.iter().enumerate() {
            let mut score = 0u64;
            for &x in p {
                score += acc_v.iter().map(|&y| x.abs_diff(y) as u64).min().unwrap();
            }
            for &x in v {
                score += acc_p.iter().map(|&y| x.abs_diff(y) as u64).min().unwrap();
            }
            let better = match best {
                None => true,
                Some((s, bb, _)) => score < s || (score == s && *b < bb),
            };
            if better {
                best = Some((score, *b, i));
            }
        }
        let (_, b, i) = best.unwrap();
        let (_, p, v) = remaining.remove(i);
        acc_p.extend(p);
        acc_v.extend(v);
        out.push(b);
    }
    out
}

fn synthetic_waveform(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let len = rng.random_range(24..96);
    let f1 = rng.random_range(0.05..1.5);
    let f2 = rng.random_range(0.05..1.5);
    let a = rng.random_range(0.0..1.0);
    (0..len)
        .map(|s| {
            let s = s as f64;
            // quantised so equal neighbours (plateaus) occur
            ((s * f1).cos() + a * (s * f2).cos() * 8.0).round() / 8.0
        })
        .collect()
}

fn search_oracle() -> Outcome {
    let mut mismatches = 0;
    let mut rounds = 0;
    for trial in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let seed_base = 1000.0;
        let mut seed_values = synthetic_waveform(&mut rng);
        while !{
            let (p, v) = oracle_extrema(&seed_values);
            !p.is_empty() && !v.is_empty()
        } {
            seed_values = synthetic_waveform(&mut rng);
        }
        let size = rng.random_range(1..=6);
        let pool: Vec<(f64, Vec<f64>)> = (0..size)
            .map(|i| (seed_base + 10.0 * (i as f64 + 1.0) + rng.random_range(0.0..5.0), synthetic_waveform(&mut rng)))
            .collect();
        let usable = pool
            .iter()
            .filter(|(_, v)| {
                let (p, q) = oracle_extrema(v);
                !p.is_empty() && !q.is_empty()
            })
            .count();
        let n = rng.random_range(1..=usable + 1);
        let expect = oracle_greedy(seed_base, &seed_values, &pool, n);
        let lib_pool = pool
            .iter()
            .map(|(b, v)| (*b, extract_extrema(v).unwrap()))
            .collect();
        let got = search_with_extrema(seed_base, &extract_extrema(&seed_values).unwrap(), lib_pool, n).unwrap();
        rounds += n - 1;
        if got != expect {
            mismatches += 1;
        }
    }
    check(
        mismatches == 0,
        format!("{mismatches} of 50 pools differ from the brute-force greedy ({rounds} selection rounds)"),
    )
}

// published 32-head set in millions, sorted
const REFERENCE_BASES: [f64; 32] = [
    1.00, 1.15, 1.30, 1.45, 2.17, 2.20, 2.23, 2.47, 2.50, 2.65, 2.68, 2.71, 2.74, 2.80, 2.83, 2.92,
    3.01, 3.04, 3.10, 3.13, 3.16, 3.22, 3.43, 3.46, 3.61, 3.88, 4.09, 4.15, 4.39, 4.45, 4.51, 4.54,
];

fn reference_search() -> Outcome {
    let t0 = Instant::now();
    let set = BaseSearchParams {
        mode: SearchMode::Searched,
        b_min: 1e6,
        b_max: 5e6,
        stride: Some(3e4),
        heads: 32,
        head_dim: 128,
        max_distance: 131_072,
        smooth: None,
    }
    .run();
    let secs = t0.elapsed().as_secs_f64();
    let set = match set {
        Ok(s) => s,
        Err(e) => return check(false, format!("search failed: {e}")),
    };
    let sorted = set.sorted();
    let mut distinct = sorted.clone();
    distinct.dedup();
    let ok = secs < 60.0
        && sorted.len() == 32
        && distinct.len() == 32
        && sorted[0] == 1e6
        && sorted.iter().all(|&b| (1e6..=4.99e6).contains(&b));
    let mut table = String::from("\n      head  ours(M)  reference(M)");
    for (h, (b, r)) in sorted.iter().zip(REFERENCE_BASES).enumerate() {
        table.push_str(&format!("\n      {:>4}  {:>7.2}  {:>12.2}", h + 1, b / 1e6, r));
    }
    check(
        ok,
        format!(
            "{} distinct bases, min {:.2}M, max {:.2}M, {secs:.1} s (< 60 s){table}",
            distinct.len(),
            sorted[0] / 1e6,
            sorted[sorted.len() - 1] / 1e6
        ),
    )
}

/// Relative error floor: gradients below this magnitude are compared
/// absolutely.
const GRAD_FLOOR: f64 = 1e-6;

fn gradient_check() -> Outcome {
    let t0 = Instant::now();
    let mut cfg = ModelConfig::new(16, 32, 2, 4, 16, PositionalStrategy::Abf { base: 1e4 }, 11).unwrap();
    cfg.init_std = 0.3;
    let params = Params::<f64>::init(&cfg);
    let model = Transformer::new(cfg.clone(), params.clone(), 16).unwrap();
    let mut probe = Transformer::new(cfg, params, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let (mut n_checked, mut n_refined) = (0usize, 0usize);
    for _ in 0..20 {
        let len = rng.random_range(3..=5);
        let toks: Vec<u32> = (0..len).map(|_| rng.random_range(0..16)).collect();
        let tgts: Vec<u32> = (0..len).map(|_| rng.random_range(0..16)).collect();
        let mut g = Params::<f64>::zeros(model.params().layout().clone());
        model.loss_and_grads(&toks, &tgts, &mut g, 1.0).unwrap();
        for i in 0..g.as_slice().len() {
            let orig = model.params().as_slice()[i];
            let mut at = |dx: f64| {
                probe.params_mut().as_mut_slice()[i] = orig + dx;
                probe.loss(&toks, &tgts).unwrap()
            };
            let an = g.as_slice()[i];
            let rel = |fd: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(GRAD_FLOOR);
            let h = 1e-5;
            let mut err = rel((at(h) - at(-h)) / (2.0 * h));
            if err > 1e-5 {
                // fourth-order stencil: truncation ~ h^4, roundoff ~ 1e-15 / h
                let h = 1e-3;
                let fd = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
                err = rel(fd);
                n_refined += 1;
            }
            probe.params_mut().as_mut_slice()[i] = orig;
            worst = worst.max(err);
            n_checked += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst < 1e-4 && secs < 120.0,
        format!(
            "max relative error {worst:.2e} (< 1e-4, floor {GRAD_FLOOR:e}) over {n_checked} checks ({n_refined} refined with the 4-point stencil), {secs:.1} s (< 120 s)"
        ),
    )
}

fn ppl_checks() -> Outcome {
    // uniform logits: zero token embeddings over a 7-token vocabulary
    let cfg = ModelConfig::new(7, 16, 2, 2, 64, PositionalStrategy::Abf { base: 1e4 }, 2).unwrap();
    let mut params = Params::<f32>::init(&cfg);
    let id = params.layout().index_of("tok_emb").unwrap();
    params.tensor_mut(id).fill(0.0);
    let model = Transformer::new(cfg, params, 64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let corpora: [Vec<u32>; 3] = [
        (0..500).map(|_| rng.random_range(0..7)).collect(),
        (0..300).map(|i| (i % 3) as u32).collect(),
        vec![6; 200],
    ];
    let mut worst = 0.0f64;
    for toks in &corpora {
        for (window, context) in [(16, 64), (64, 64), (5, 32)] {
            let ppl = sliding_window_ppl(&model, toks, window, context).unwrap();
            worst = worst.max((ppl - 7.0).abs());
        }
    }

    // converged model on a periodic corpus
    let periodic = CorpusSpec::Periodic {
        pattern: vec![3, 1, 4, 15, 9, 2, 6],
    };
    let cfg = ModelConfig::new(64, 32, 1, 4, 64, PositionalStrategy::Abf { base: 1e4 }, 4).unwrap();
    let schedule = TrainSchedule {
        warmup_steps: 10,
        ..TrainSchedule::single(Stage {
            strategy: PositionalStrategy::Abf { base: 1e4 },
            context_len: 64,
            tokens: 8 * 64 * 150,
            learning_rate: 1e-2,
        })
    };
    let trained = run_schedule(init_model(cfg).unwrap(), &schedule, &periodic.build().unwrap(), 7).unwrap();
    let spec = PplSpec {
        corpus: periodic,
        tokens: 1024,
        window: 32,
        context: 64,
    };
    let periodic_ppl = eval_ppl(&trained.checkpoint, &spec, 8).unwrap().ppl;
    check(
        worst < 1e-3 && periodic_ppl < 1.05,
        format!("uniform |ppl - 7| {worst:.2e} (< 1e-3); periodic ppl {periodic_ppl:.4} (< 1.05)"),
    )
}

fn niah_calibration() -> Outcome {
    let grid = EvalGrid {
        tasks: NiahTask::ALL.to_vec(),
        lengths: vec![256, 512, 1024, 2048, 4096],
        seeds: niah_seeds(0, 5),
    };
    let meta = |label: &str| ReportMeta {
        label: label.into(),
        strategy: "none".into(),
        checkpoint_id: "none".into(),
        seed: 0,
    };
    let random = RandomAnswerer { seed: 9 };
    let reports = run_eval_matrix(
        &[
            EvalEntry {
                meta: meta("oracle"),
                answerer: &OracleAnswerer,
            },
            EvalEntry {
                meta: meta("random"),
                answerer: &random,
            },
        ],
        &grid,
    )
    .unwrap();
    let oracle_min = reports[0]
        .cells
        .iter()
        .map(|c| c.score)
        .fold(f64::INFINITY, f64::min);
    let random_avg = reports[1].average;
    check(
        oracle_min == 100.0 && reports[0].average == 100.0 && random_avg < 5.0,
        format!(
            "oracle min cell {oracle_min:.2} (== 100) over {} cells; random average {random_avg:.2} (< 5)",
            reports[0].cells.len()
        ),
    )
}

/// Trains the three trend runs, evaluates them and writes every report
/// under `dir`. Returns the comparison reports and the path of every file
/// written.
fn run_trend(dir: &Path, tokens: u64, grid: &EvalGrid, seed: u64) -> (Vec<harpe_core::eval::EvalReport>, Vec<PathBuf>) {
    let mut reports = Vec::new();
    let mut files = Vec::new();
    for cfg in trend_experiments(tokens, seed) {
        let exp = cfg.resolve(dir).unwrap();
        let out = dir.join(&cfg.name);
        let outcome = exp.train().unwrap();
        write_train_outputs(&out, &exp, &outcome).unwrap();
        let report = eval_niah(&outcome.checkpoint, &cfg.name, grid, seed).unwrap();
        fs::write(out.join("niah.csv"), report.cells_csv()).unwrap();
        fs::write(out.join("niah.json"), to_json(&report).unwrap()).unwrap();
        for f in ["model.ckpt", "losses.csv", "summary.json", "resolved_schedule.json", "niah.csv", "niah.json"] {
            files.push(out.join(f));
        }
        reports.push(report);
    }
    fs::write(dir.join("comparison.csv"), comparison_csv(&reports).unwrap()).unwrap();
    fs::write(dir.join("comparison.txt"), comparison_table(&reports).unwrap()).unwrap();
    files.push(dir.join("comparison.csv"));
    files.push(dir.join("comparison.txt"));
    (reports, files)
}

fn snapshot(files: &[PathBuf], root: &Path) -> BTreeMap<String, Vec<u8>> {
    files
        .iter()
        .map(|f| {
            (
                f.strip_prefix(root).unwrap().display().to_string(),
                fs::read(f).unwrap(),
            )
        })
        .collect()
}

fn compare_runs(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    a.iter()
        .filter(|(k, v)| b.get(*k) != Some(*v))
        .map(|(k, _)| k.clone())
        .collect()
}

fn full_trend(tokens: u64) -> (Outcome, Outcome) {
    let t0 = Instant::now();
    let grid = EvalGrid {
        tasks: NiahTask::ALL.to_vec(),
        lengths: vec![256, 512, 1024, 2048, 4096],
        seeds: niah_seeds(0, 10),
    };
    let root = tempfile::tempdir().unwrap();
    let (a_dir, b_dir) = (root.path().join("a"), root.path().join("b"));
    let (reports, files_a) = run_trend(&a_dir, tokens, &grid, 0);
    let mut lines = Vec::new();
    let mut ok = true;
    for r in &reports {
        let acc = r.cell_mean(NiahTask::Single1, 1024).unwrap_or(0.0);
        ok &= acc >= 90.0;
        lines.push(format!("{} single-needle@1024 {acc:.1}", r.meta.label));
    }
    let longest = |label: &str| {
        reports
            .iter()
            .find(|r| r.meta.label == label)
            .and_then(|r| r.per_length.last().copied())
            .unwrap_or(f64::NAN)
    };
    let grid_text = comparison_table(&reports).unwrap();
    let c9 = check(
        ok,
        format!(
            "{tokens} tokens per run: {} (>= 90 each); at 4096 harpe {:.2} vs abf_multi {:.2} (reported only); {:.0} s\n{}",
            lines.join(", "),
            longest("harpe"),
            longest("abf_multi"),
            t0.elapsed().as_secs_f64(),
            grid_text.trim_end()
        ),
    );
    let (_, files_b) = run_trend(&b_dir, tokens, &grid, 0);
    let diff = compare_runs(&snapshot(&files_a, &a_dir), &snapshot(&files_b, &b_dir));
    let c10 = check(
        diff.is_empty(),
        format!("{} report files compared, differing: {diff:?}", files_a.len()),
    );
    (c9, c10)
}

fn reduced_determinism() -> Outcome {
    let t0 = Instant::now();
    // a handful of optimiser steps per run; only determinism is checked
    let tokens = 3 * 8 * 1024;
    let grid = EvalGrid {
        tasks: vec![NiahTask::Single1, NiahTask::Multiquery],
        lengths: vec![256, 512],
        seeds: niah_seeds(0, 2),
    };
    let root = tempfile::tempdir().unwrap();
    let (a_dir, b_dir) = (root.path().join("a"), root.path().join("b"));
    let (_, files_a) = run_trend(&a_dir, tokens, &grid, 0);
    let (_, files_b) = run_trend(&b_dir, tokens, &grid, 0);
    let diff = compare_runs(&snapshot(&files_a, &a_dir), &snapshot(&files_b, &b_dir));
    check(
        diff.is_empty(),
        format!(
            "REDUCED BUDGET ({tokens} tokens per run, 2 tasks x 2 lengths x 2 seeds): {} report files compared, differing: {diff:?}, {:.0} s",
            files_a.len(),
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let want = |name: &str| filter.is_empty() || filter.iter().any(|f| name.contains(f.as_str()));

    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 rope-correctness", rope_correctness),
        ("2 degenerate-harpe-equivalence", degenerate_harpe),
        ("3 base-set-algebra", base_algebra),
        ("4 search-oracle-equivalence", search_oracle),
        ("5 search-at-reference-settings", reference_search),
        ("6 gradient-correctness", gradient_check),
        ("7 ppl-analytic-check", ppl_checks),
        ("8 niah-harness-calibration", niah_calibration),
    ];
    let mut results: Vec<(String, Outcome)> = Vec::new();
    for (name, f) in criteria {
        if want(name) {
            results.push((name.to_string(), f()));
        }
    }

    let full = std::env::var("HARPE_ACCEPT_TREND").is_ok_and(|v| v == "1");
    if full {
        let tokens = std::env::var("HARPE_ACCEPT_TREND_TOKENS")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(20_000_000);
        let (c9, c10) = full_trend(tokens);
        results.push(("9 trend-experiment".into(), c9));
        results.push(("10 determinism".into(), c10));
    } else {
        if want("9 trend-experiment") {
            results.push((
                "9 trend-experiment".into(),
                Outcome {
                    status: Status::Skip,
                    detail: "NOT RUN: 3 x 20M training tokens take hours on this machine; set HARPE_ACCEPT_TREND=1".into(),
                },
            ));
        }
        if want("10 determinism") {
            results.push(("10 determinism".into(), reduced_determinism()));
        }
    }

    println!();
    for (name, o) in &results {
        let tag = match o.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        };
        println!("[{tag}] criterion {name}: {}", o.detail);
    }
    let failed = results.iter().filter(|(_, o)| o.status == Status::Fail).count();
    println!("\nacceptance: {failed} failed, {} total", results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
