//! `harpe`: base search, training and long-context evaluation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use harpe_core::bases::compute_waveform_with;
use harpe_core::corpus::CorpusSpec;
use harpe_core::eval::niah::parse_tasks;
use harpe_core::eval::{comparison_csv, comparison_table, EvalGrid, EvalReport};
use harpe_core::experiment::{
    eval_niah, eval_ppl, niah_seeds, parse_json, read_json, to_json, write_train_outputs,
    BaseSearchParams, BasesFile, ExperimentConfig, PplSpec, SearchMode,
};
use harpe_core::model::Checkpoint;

#[derive(Parser)]
#[command(name = "harpe", version, about = "Head-adaptive RoPE: base search, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Searched,
    Uniform,
}

#[derive(Subcommand)]
enum Command {
    /// Select one RoPE base per head and write bases.json.
    SearchBases {
        /// Smallest base; always selected first in searched mode.
        #[arg(long)]
        b_min: f64,
        #[arg(long)]
        b_max: f64,
        /// Candidate stride (searched mode).
        #[arg(long)]
        stride: Option<f64>,
        /// Number of bases to select.
        #[arg(long)]
        heads: usize,
        #[arg(long)]
        head_dim: usize,
        /// Waveform grid covers distances 0..=max-distance.
        #[arg(long, default_value_t = 4096)]
        max_distance: usize,
        #[arg(long, value_enum, default_value_t = Mode::Searched)]
        mode: Mode,
        /// Moving-average window applied before extrema extraction.
        #[arg(long)]
        smooth: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the attention waveform of one base as CSV.
    InspectWaveform {
        #[arg(long)]
        base: f64,
        #[arg(long)]
        head_dim: usize,
        #[arg(long)]
        max_distance: usize,
        #[arg(long)]
        smooth: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train (or continue training) a model from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for model.ckpt, losses.csv and summaries.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's root seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sliding-window perplexity of a checkpoint on a synthetic corpus.
    EvalPpl {
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus spec: a JSON file, or inline JSON starting with '{'.
        #[arg(long)]
        corpus_spec: String,
        /// Stride S; each window scores its last S tokens.
        #[arg(long, default_value_t = 256)]
        window: usize,
        #[arg(long, default_value_t = 2048)]
        context: usize,
        /// Corpus length; defaults to 4 * context.
        #[arg(long)]
        tokens: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Needle-in-a-haystack grid; writes CSV plus a JSON report alongside.
    EvalNiah {
        #[arg(long)]
        ckpt: PathBuf,
        /// `all` or comma-separated task names.
        #[arg(long, default_value = "all")]
        tasks: String,
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048,4096")]
        lengths: Vec<usize>,
        /// Seeds (needle depths) per task and length.
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Row label in comparison grids; defaults to the strategy.
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Join NiaH JSON reports into one comparison grid (CSV plus text).
    Compare {
        /// Reports written by eval-niah.
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::SearchBases {
            b_min,
            b_max,
            stride,
            heads,
            head_dim,
            max_distance,
            mode,
            smooth,
            out,
        } => {
            let mode = match mode {
                Mode::Searched => SearchMode::Searched,
                Mode::Uniform => SearchMode::Uniform,
            };
            let file = BasesFile::from_search(BaseSearchParams {
                mode,
                b_min,
                b_max,
                stride,
                heads,
                head_dim,
                max_distance,
                smooth,
            })?;
            write(&out, &to_json(&file)?)?;
            log::info!("{} bases written to {}", file.bases.len(), out.display());
        }
        Command::InspectWaveform {
            base,
            head_dim,
            max_distance,
            smooth,
            out,
        } => {
            let w = compute_waveform_with(base, head_dim, max_distance, smooth)?;
            let mut csv = String::from("distance,value,is_peak,is_valley\n");
            for (s, v) in w.values.iter().enumerate() {
                let peak = w.peaks.binary_search(&s).is_ok();
                let valley = w.valleys.binary_search(&s).is_ok();
                csv.push_str(&format!("{s},{v:.17e},{peak},{valley}\n"));
            }
            write(&out, &csv)?;
        }
        Command::Train { config, out, seed } => {
            let mut exp = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                let mut cfg = exp.config.clone();
                cfg.seed = seed;
                exp = cfg.resolve(config.parent().unwrap_or(Path::new(".")))?;
            }
            let outcome = exp.train()?;
            let summary = write_train_outputs(&out, &exp, &outcome)?;
            println!("{}", to_json(&summary)?.trim_end());
        }
        Command::EvalPpl {
            ckpt,
            corpus_spec,
            window,
            context,
            tokens,
            seed,
            out,
        } => {
            let corpus: CorpusSpec = if corpus_spec.trim_start().starts_with('{') {
                parse_json(&corpus_spec)?
            } else {
                read_json(Path::new(&corpus_spec))?
            };
            let ckpt = Checkpoint::load(&ckpt)?;
            let spec = PplSpec {
                corpus,
                tokens: tokens.unwrap_or(4 * context),
                window,
                context,
            };
            let report = eval_ppl(&ckpt, &spec, seed)?;
            write(&out, &to_json(&report)?)?;
            println!("ppl {:.4}", report.ppl);
        }
        Command::EvalNiah {
            ckpt,
            tasks,
            lengths,
            seeds,
            seed,
            label,
            out,
        } => {
            let grid = EvalGrid {
                tasks: parse_tasks(&tasks)?,
                lengths,
                seeds: niah_seeds(seed, seeds),
            };
            grid.validate()?;
            let ckpt = Checkpoint::load(&ckpt)?;
            let label = label.unwrap_or_else(|| ckpt.config.strategy.label());
            let report = eval_niah(&ckpt, &label, &grid, seed)?;
            write(&out, &report.cells_csv())?;
            write(&out.with_extension("json"), &to_json(&report)?)?;
            print!("{}", comparison_table(std::slice::from_ref(&report))?);
        }
        Command::Compare { reports, out } => {
            if reports.is_empty() {
                bail!("compare needs at least one report");
            }
            let reports = reports
                .iter()
                .map(|p| read_json::<EvalReport>(p).with_context(|| format!("reading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            write(&out, &comparison_csv(&reports)?)?;
            let table = comparison_table(&reports)?;
            write(&out.with_extension("txt"), &table)?;
            print!("{table}");
        }
    }
    Ok(())
}

fn init_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("HARPE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("HARPE_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
