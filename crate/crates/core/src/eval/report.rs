//! Evaluation matrix over (checkpoint, task, length, seed) and the
//! comparison grid built from its reports.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::niah::{generate_default, score_niah, NiahCase, NiahTask};
use crate::corpus::vocab;
use crate::error::{HarpeError, Result};
use crate::model::Transformer;
use crate::seed::{rng_for, sub_seed};
use crate::Real;

/// Produces an answer continuation for a needle prompt.
pub trait Answerer: Sync {
    /// Vocabulary the answerer was built for, if it has one.
    fn vocab(&self) -> Option<usize> {
        None
    }

    fn answer(&self, case: &NiahCase) -> Result<Vec<u32>>;
}

impl<T: Real> Answerer for Transformer<T> {
    fn vocab(&self) -> Option<usize> {
        Some(self.config().vocab)
    }

    fn answer(&self, case: &NiahCase) -> Result<Vec<u32>> {
        self.generate_greedy(&case.prompt(), case.max_new_tokens(), Some(vocab::END))
    }
}

/// Recites the expected answer.
pub struct OracleAnswerer;

impl Answerer for OracleAnswerer {
    fn answer(&self, case: &NiahCase) -> Result<Vec<u32>> {
        Ok(case.answer_tokens())
    }
}

/// Uniform random tokens, as many as the decoding budget allows.
pub struct RandomAnswerer {
    pub seed: u64,
}

impl Answerer for RandomAnswerer {
    fn answer(&self, case: &NiahCase) -> Result<Vec<u32>> {
        let mut rng = rng_for(self.seed ^ case.seed, "random_answerer");
        Ok((0..case.max_new_tokens())
            .map(|_| rng.random_range(0..vocab::SIZE as u32))
            .collect())
    }
}

/// Cartesian grid of tasks, lengths and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub tasks: Vec<NiahTask>,
    pub lengths: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl EvalGrid {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() || self.lengths.is_empty() || self.seeds.is_empty() {
            return Err(HarpeError::invalid("evaluation grid has an empty axis"));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.tasks.len() * self.lengths.len() * self.seeds.len()
    }

    /// Needle depth for the `i`-th of the seeds: evenly spaced over [0, 1].
    pub fn depth(&self, i: usize) -> f64 {
        if self.seeds.len() == 1 {
            0.5
        } else {
            i as f64 / (self.seeds.len() - 1) as f64
        }
    }
}

/// The case for one cell. `length` bounds the prompt plus the decoding
/// budget, so a model needs a context of exactly `length`.
pub fn cell_case(task: NiahTask, length: usize, depth: f64, seed: u64) -> Result<NiahCase> {
    let d = task.defaults(length);
    let budget = task.answer_len(&d) + 8;
    let prompt_len = length.checked_sub(budget).ok_or_else(|| {
        HarpeError::invalid(format!("length {length} too short for {task}"))
    })?;
    let case_seed = sub_seed(seed, &format!("{task}/{length}"));
    generate_default(task, prompt_len, depth, case_seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub task: NiahTask,
    pub length: usize,
    pub seed: u64,
    /// 0 for failed cells.
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub label: String,
    pub strategy: String,
    pub checkpoint_id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub lengths: Vec<usize>,
    pub per_length: Vec<f64>,
    pub tasks: Vec<NiahTask>,
    pub per_task: Vec<f64>,
    /// Mean of `per_length`.
    pub average: f64,
    pub cells: Vec<CellResult>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

impl EvalReport {
    /// Aggregates cells; failed cells count as 0.
    pub fn from_cells(meta: ReportMeta, tasks: &[NiahTask], lengths: &[usize], cells: Vec<CellResult>) -> Self {
        let per_length: Vec<f64> = lengths
            .iter()
            .map(|&l| mean(cells.iter().filter(|c| c.length == l).map(|c| c.score)))
            .collect();
        let per_task: Vec<f64> = tasks
            .iter()
            .map(|&t| mean(cells.iter().filter(|c| c.task == t).map(|c| c.score)))
            .collect();
        let average = mean(per_length.iter().copied());
        Self {
            meta,
            lengths: lengths.to_vec(),
            per_length,
            tasks: tasks.to_vec(),
            per_task,
            average,
            cells,
        }
    }

    /// Mean score of one task at one length.
    pub fn cell_mean(&self, task: NiahTask, length: usize) -> Option<f64> {
        let xs: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.task == task && c.length == length)
            .map(|c| c.score)
            .collect();
        (!xs.is_empty()).then(|| mean(xs.into_iter()))
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }

    /// `task,length,seed,score` rows.
    pub fn cells_csv(&self) -> String {
        let mut out = String::from("task,length,seed,score\n");
        for c in &self.cells {
            writeln!(out, "{},{},{},{:.2}", c.task, c.length, c.seed, c.score).unwrap();
        }
        out
    }
}

/// One evaluated answerer.
pub struct EvalEntry<'a> {
    pub meta: ReportMeta,
    pub answerer: &'a dyn Answerer,
}

/// Runs every cell of every entry. Cell errors are recorded in the report
/// and the run continues; a vocabulary mismatch fails the whole call.
pub fn run_eval_matrix(entries: &[EvalEntry<'_>], grid: &EvalGrid) -> Result<Vec<EvalReport>> {
    grid.validate()?;
    for e in entries {
        if let Some(v) = e.answerer.vocab() {
            if v != vocab::SIZE {
                return Err(HarpeError::invalid(format!(
                    "{}: vocabulary {v} differs from the generator's {}",
                    e.meta.label,
                    vocab::SIZE
                )));
            }
        }
    }
    let mut keys = Vec::with_capacity(grid.n_cells());
    for &task in &grid.tasks {
        for &length in &grid.lengths {
            for (i, &seed) in grid.seeds.iter().enumerate() {
                keys.push((task, length, i, seed));
            }
        }
    }
    Ok(entries
        .iter()
        .map(|e| {
            let cells: Vec<CellResult> = keys
                .par_iter()
                .map(|&(task, length, i, seed)| {
                    let run = || -> Result<f64> {
                        let case = cell_case(task, length, grid.depth(i), seed)?;
                        let out = e.answerer.answer(&case)?;
                        Ok(score_niah(&case, &out))
                    };
                    match run() {
                        Ok(score) => CellResult {
                            task,
                            length,
                            seed,
                            score,
                            error: None,
                        },
                        Err(err) => {
                            log::warn!("{} {task} len {length} seed {seed}: {err}", e.meta.label);
                            CellResult {
                                task,
                                length,
                                seed,
                                score: 0.0,
                                error: Some(err.to_string()),
                            }
                        }
                    }
                })
                .collect();
            EvalReport::from_cells(e.meta.clone(), &grid.tasks, &grid.lengths, cells)
        })
        .collect())
}

fn check_comparable(reports: &[EvalReport]) -> Result<&[usize]> {
    let first = reports
        .first()
        .ok_or_else(|| HarpeError::invalid("nothing to compare: no reports given"))?;
    if let Some(r) = reports.iter().find(|r| r.lengths != first.lengths) {
        return Err(HarpeError::invalid(format!(
            "report {} uses lengths {:?}, expected {:?}",
            r.meta.label, r.lengths, first.lengths
        )));
    }
    Ok(&first.lengths)
}

/// One row per report: per-length averages then the overall average.
pub fn comparison_csv(reports: &[EvalReport]) -> Result<String> {
    let lengths = check_comparable(reports)?;
    let mut out = String::from("method");
    for l in lengths {
        write!(out, ",{l}").unwrap();
    }
    out.push_str(",avg\n");
    for r in reports {
        out.push_str(&r.meta.label);
        for s in &r.per_length {
            write!(out, ",{s:.2}").unwrap();
        }
        writeln!(out, ",{:.2}", r.average).unwrap();
    }
    Ok(out)
}

/// The same grid as [`comparison_csv`], aligned for reading.
pub fn comparison_table(reports: &[EvalReport]) -> Result<String> {
    let lengths = check_comparable(reports)?;
    let name_w = reports
        .iter()
        .map(|r| r.meta.label.len())
        .max()
        .unwrap_or(0)
        .max("method".len());
    let mut out = format!("{:<name_w$}", "method");
    for l in lengths {
        write!(out, " {:>8}", l).unwrap();
    }
    writeln!(out, " {:>8}", "avg").unwrap();
    for r in reports {
        write!(out, "{:<name_w$}", r.meta.label).unwrap();
        for s in &r.per_length {
            write!(out, " {s:>8.2}").unwrap();
        }
        writeln!(out, " {:>8.2}", r.average).unwrap();
    }
    Ok(out)
}
