//! JSON experiment configs and the train / evaluate plumbing behind the CLI.
//!
//! Every random stream descends from the config's root `seed` through the
//! named sub-seeds `model`, `corpus` and `niah`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attention::{pi_scale_for, HeadOrder, PositionalStrategy};
use crate::bases::{candidate_bases, search_bases_with, uniform_bases, BaseSet, Provenance};
use crate::corpus::{vocab, CorpusSpec};
use crate::error::{HarpeError, Result};
use crate::eval::{
    run_eval_matrix, sliding_window_nll, EvalEntry, EvalGrid, EvalReport, NiahTask, ReportMeta,
};
use crate::model::{
    init_model, run_schedule, Checkpoint, ModelConfig, Stage, TrainOutcome, TrainSchedule, Transformer,
};
use crate::seed::sub_seed;

pub const SCHEMA_VERSION: u32 = 1;
pub const BASES_FILE_VERSION: u32 = 1;

/// Parses JSON, reporting the path of the offending field on failure.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        HarpeError::Schema {
            field,
            message: e.into_inner().to_string(),
        }
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(HarpeError::NotFound(path.to_path_buf()));
    }
    parse_json(&fs::read_to_string(path)?)
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Searched,
    Uniform,
}

/// Everything needed to reproduce a base set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSearchParams {
    pub mode: SearchMode,
    pub b_min: f64,
    pub b_max: f64,
    /// Candidate stride; searched mode only.
    #[serde(default)]
    pub stride: Option<f64>,
    pub heads: usize,
    pub head_dim: usize,
    pub max_distance: usize,
    /// Moving-average window applied to waveforms before extrema extraction.
    #[serde(default)]
    pub smooth: Option<usize>,
}

impl BaseSearchParams {
    pub fn run(&self) -> Result<BaseSet> {
        match self.mode {
            SearchMode::Uniform => uniform_bases(self.b_min, self.b_max, self.heads),
            SearchMode::Searched => {
                let stride = self
                    .stride
                    .ok_or_else(|| HarpeError::invalid("searched mode needs a stride"))?;
                let candidates = candidate_bases(self.b_min, self.b_max, stride)?;
                search_bases_with(
                    &candidates,
                    self.b_min,
                    self.heads,
                    self.head_dim,
                    self.max_distance,
                    self.smooth,
                )
            }
        }
    }
}

/// The `bases.json` document written by `search-bases`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasesFile {
    pub version: u32,
    pub params: BaseSearchParams,
    /// Ascending.
    pub bases: Vec<f64>,
    pub selection_order: Vec<f64>,
}

impl BasesFile {
    pub fn from_search(params: BaseSearchParams) -> Result<Self> {
        let set = params.run()?;
        Ok(Self {
            version: BASES_FILE_VERSION,
            params,
            bases: set.sorted(),
            selection_order: set.bases().to_vec(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: Self = read_json(path)?;
        if f.version != BASES_FILE_VERSION {
            return Err(HarpeError::Schema {
                field: "version".into(),
                message: format!("expected {BASES_FILE_VERSION}, found {}", f.version),
            });
        }
        Ok(f)
    }

    /// Base set in selection order.
    pub fn base_set(&self) -> Result<BaseSet> {
        let provenance = match self.params.mode {
            SearchMode::Searched => Provenance::Searched,
            SearchMode::Uniform => Provenance::Uniform,
        };
        Ok(BaseSet::explicit(self.selection_order.clone())?.with_provenance(provenance))
    }
}

/// Inline base search inside an experiment config; heads and head
/// dimension come from the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpec {
    pub mode: SearchMode,
    pub b_min: f64,
    pub b_max: f64,
    #[serde(default)]
    pub stride: Option<f64>,
    /// Defaults to the model's `max_context`.
    #[serde(default)]
    pub max_distance: Option<usize>,
    #[serde(default)]
    pub smooth: Option<usize>,
}

/// Positional strategy as written in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategySpec {
    Rope {
        base: f64,
    },
    Abf {
        base: f64,
    },
    /// Either `scale` or both `target_len` and `trained_len`.
    Pi {
        base: f64,
        #[serde(default)]
        scale: Option<f64>,
        #[serde(default)]
        target_len: Option<usize>,
        #[serde(default)]
        trained_len: Option<usize>,
    },
    /// Exactly one of `bases_file`, `bases` or `search`.
    Harpe {
        #[serde(default)]
        bases_file: Option<PathBuf>,
        #[serde(default)]
        bases: Option<Vec<f64>>,
        #[serde(default)]
        search: Option<SearchSpec>,
        #[serde(default)]
        order: HeadOrder,
    },
}

impl StrategySpec {
    /// Relative `bases_file` paths are taken from `base_dir`.
    pub fn resolve(&self, model: &ModelSpec, base_dir: &Path) -> Result<PositionalStrategy> {
        let s = match self {
            StrategySpec::Rope { base } => PositionalStrategy::Vanilla { base: *base },
            StrategySpec::Abf { base } => PositionalStrategy::Abf { base: *base },
            StrategySpec::Pi {
                base,
                scale,
                target_len,
                trained_len,
            } => {
                let scale = match (scale, target_len, trained_len) {
                    (Some(s), None, None) => *s,
                    (None, Some(t), Some(r)) => pi_scale_for(*t, *r)?,
                    _ => {
                        return Err(HarpeError::invalid(
                            "pi needs either scale or both target_len and trained_len",
                        ))
                    }
                };
                PositionalStrategy::Pi { scale, base: *base }
            }
            StrategySpec::Harpe {
                bases_file,
                bases,
                search,
                order,
            } => {
                let set = match (bases_file, bases, search) {
                    (Some(f), None, None) => {
                        let path = if f.is_absolute() { f.clone() } else { base_dir.join(f) };
                        BasesFile::load(&path)?.base_set()?
                    }
                    (None, Some(b), None) => BaseSet::explicit(b.clone())?,
                    (None, None, Some(sp)) => BaseSearchParams {
                        mode: sp.mode,
                        b_min: sp.b_min,
                        b_max: sp.b_max,
                        stride: sp.stride,
                        heads: model.n_heads,
                        head_dim: model.head_dim()?,
                        max_distance: sp.max_distance.unwrap_or(model.max_context),
                        smooth: sp.smooth,
                    }
                    .run()?,
                    _ => {
                        return Err(HarpeError::invalid(
                            "harpe needs exactly one of bases_file, bases or search",
                        ))
                    }
                };
                PositionalStrategy::Harpe {
                    bases: set,
                    order: *order,
                }
            }
        };
        s.validate(model.n_heads)?;
        Ok(s)
    }
}

fn d_vocab() -> usize {
    vocab::SIZE
}
fn d_init_std() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "d_vocab")]
    pub vocab: usize,
    pub width: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_context: usize,
    #[serde(default = "d_init_std")]
    pub init_std: f64,
}

impl ModelSpec {
    fn head_dim(&self) -> Result<usize> {
        if self.n_heads == 0 || self.width % self.n_heads != 0 {
            return Err(HarpeError::invalid(format!(
                "width {} is not divisible by {} heads",
                self.width, self.n_heads
            )));
        }
        Ok(self.width / self.n_heads)
    }
}

/// `"all"` or a list of task names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskSelection {
    Named(String),
    List(Vec<NiahTask>),
}

impl Default for TaskSelection {
    fn default() -> Self {
        TaskSelection::Named("all".into())
    }
}

impl TaskSelection {
    pub fn tasks(&self) -> Result<Vec<NiahTask>> {
        match self {
            TaskSelection::Named(s) => crate::eval::niah::parse_tasks(s),
            TaskSelection::List(l) if l.is_empty() => Err(HarpeError::invalid("empty task list")),
            TaskSelection::List(l) => Ok(l.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PplSpec {
    pub corpus: CorpusSpec,
    /// Length of the evaluation stream.
    pub tokens: usize,
    pub window: usize,
    pub context: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default)]
    pub tasks: TaskSelection,
    pub lengths: Vec<usize>,
    /// Number of needle seeds (and depths) per (task, length).
    pub seeds: usize,
    #[serde(default)]
    pub ppl: Option<PplSpec>,
}

impl EvalSpec {
    pub fn grid(&self, root_seed: u64) -> Result<EvalGrid> {
        let g = EvalGrid {
            tasks: self.tasks.tasks()?,
            lengths: self.lengths.clone(),
            seeds: niah_seeds(root_seed, self.seeds),
        };
        g.validate()?;
        Ok(g)
    }
}

/// The `n` needle seeds derived from a root seed.
pub fn niah_seeds(root_seed: u64, n: usize) -> Vec<u64> {
    let root = sub_seed(root_seed, "niah");
    (0..n).map(|i| sub_seed(root, &i.to_string())).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Continue from this checkpoint instead of a fresh initialisation.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub model: ModelSpec,
    pub schedule: TrainSchedule<StrategySpec>,
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub eval: Option<EvalSpec>,
    #[serde(default)]
    pub paths: Paths,
}

/// A config with strategies resolved and files located.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub init_checkpoint: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Experiment> {
        let cfg: ExperimentConfig = read_json(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(dir)
    }

    pub fn resolve(&self, base_dir: &Path) -> Result<Experiment> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(HarpeError::Schema {
                field: "schema_version".into(),
                message: format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            });
        }
        let schedule = self
            .schedule
            .try_map(|s| s.resolve(&self.model, base_dir))?;
        let first = schedule
            .stages
            .first()
            .ok_or_else(|| HarpeError::invalid("schedule has no stages"))?;
        let mut model = ModelConfig::new(
            self.model.vocab,
            self.model.width,
            self.model.n_layers,
            self.model.n_heads,
            self.model.max_context,
            first.strategy.clone(),
            sub_seed(self.seed, "model"),
        )?;
        model.init_std = self.model.init_std;
        model.validate()?;
        schedule.validate(model.max_context, model.n_heads)?;
        self.corpus.build()?;
        if let Some(e) = &self.eval {
            e.grid(self.seed)?;
        }
        let init_checkpoint = self.paths.init_checkpoint.as_ref().map(|p| {
            if p.is_absolute() {
                p.clone()
            } else {
                base_dir.join(p)
            }
        });
        if let Some(p) = &init_checkpoint {
            if !p.exists() {
                return Err(HarpeError::NotFound(p.clone()));
            }
        }
        Ok(Experiment {
            config: self.clone(),
            model,
            schedule,
            init_checkpoint,
        })
    }
}

impl Experiment {
    pub fn corpus_seed(&self) -> u64 {
        sub_seed(self.config.seed, "corpus")
    }

    /// Trains from the init checkpoint (or a fresh model) through the
    /// whole schedule.
    pub fn train(&self) -> Result<TrainOutcome> {
        let ckpt = match &self.init_checkpoint {
            Some(p) => {
                let c = Checkpoint::load(p)?;
                let same_shape = c.config.vocab == self.model.vocab
                    && c.config.width == self.model.width
                    && c.config.n_layers == self.model.n_layers
                    && c.config.n_heads == self.model.n_heads;
                if !same_shape {
                    return Err(HarpeError::invalid(format!(
                        "{} does not match the configured model shape",
                        p.display()
                    )));
                }
                Checkpoint {
                    config: ModelConfig {
                        max_context: self.model.max_context,
                        ..c.config
                    },
                    ..c
                }
            }
            None => init_model(self.model.clone())?,
        };
        let corpus = self.config.corpus.build()?;
        run_schedule(ckpt, &self.schedule, &corpus, self.corpus_seed())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub name: String,
    pub checkpoint_id: String,
    pub steps: u64,
    pub tokens_seen: u64,
    pub stages: Vec<StageSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub strategy: String,
    pub context_len: usize,
    pub steps: usize,
    pub first_loss: f64,
    /// Mean of the last 10 steps.
    pub final_loss: f64,
}

pub fn summarize(name: &str, outcome: &TrainOutcome) -> TrainSummary {
    TrainSummary {
        name: name.to_string(),
        checkpoint_id: outcome.checkpoint.id(),
        steps: outcome.checkpoint.state.step,
        tokens_seen: outcome.checkpoint.state.tokens_seen,
        stages: outcome
            .curves
            .iter()
            .map(|c| {
                let tail = &c.points[c.points.len().saturating_sub(10)..];
                StageSummary {
                    strategy: c.strategy.clone(),
                    context_len: c.context_len,
                    steps: c.points.len(),
                    first_loss: c.points.first().map_or(f64::NAN, |p| p.loss),
                    final_loss: tail.iter().map(|p| p.loss).sum::<f64>() / tail.len() as f64,
                }
            })
            .collect(),
    }
}

/// Writes `model.ckpt`, `losses.csv`, `summary.json` and
/// `resolved_schedule.json` into `out_dir`.
pub fn write_train_outputs(out_dir: &Path, exp: &Experiment, outcome: &TrainOutcome) -> Result<TrainSummary> {
    fs::create_dir_all(out_dir)?;
    outcome.checkpoint.save(&out_dir.join("model.ckpt"))?;
    fs::write(out_dir.join("losses.csv"), outcome.curves_csv())?;
    let summary = summarize(&exp.config.name, outcome);
    fs::write(out_dir.join("summary.json"), to_json(&summary)?)?;
    fs::write(out_dir.join("resolved_schedule.json"), to_json(&exp.schedule)?)?;
    Ok(summary)
}

/// Loads a checkpoint as an `f32` model accepting `context_len` tokens.
pub fn load_model(ckpt: &Checkpoint, context_len: usize) -> Result<Transformer<f32>> {
    let mut config = ckpt.config.clone();
    config.max_context = config.max_context.max(context_len);
    Transformer::new(config, ckpt.params.clone(), context_len)
}

/// Needle evaluation of one checkpoint over `grid`.
pub fn eval_niah(ckpt: &Checkpoint, label: &str, grid: &EvalGrid, seed: u64) -> Result<EvalReport> {
    let longest = *grid.lengths.iter().max().unwrap_or(&1);
    let model = load_model(ckpt, longest)?;
    let meta = ReportMeta {
        label: label.to_string(),
        strategy: ckpt.config.strategy.label(),
        checkpoint_id: ckpt.id(),
        seed,
    };
    let mut reports = run_eval_matrix(
        &[EvalEntry {
            meta,
            answerer: &model,
        }],
        grid,
    )?;
    Ok(reports.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplReport {
    pub checkpoint_id: String,
    pub strategy: String,
    pub window: usize,
    pub context: usize,
    pub corpus_tokens: usize,
    pub scored_tokens: usize,
    pub mean_nll: f64,
    pub ppl: f64,
}

/// Sliding-window perplexity on a stream drawn from `corpus` with the
/// corpus sub-seed of `seed`.
pub fn eval_ppl(ckpt: &Checkpoint, spec: &PplSpec, seed: u64) -> Result<PplReport> {
    let corpus = spec.corpus.build()?;
    let tokens = corpus.stream(spec.tokens, sub_seed(seed, "corpus"));
    let model = load_model(ckpt, spec.context)?;
    let nll = sliding_window_nll(&model, &tokens, spec.window, spec.context)?;
    Ok(PplReport {
        checkpoint_id: ckpt.id(),
        strategy: ckpt.config.strategy.label(),
        window: spec.window,
        context: spec.context,
        corpus_tokens: tokens.len(),
        scored_tokens: nll.count,
        mean_nll: nll.mean(),
        ppl: nll.ppl(),
    })
}

/// The three runs of the trend experiment, sharing seed, model and total
/// token budget: single-stage ABF at 1024, a three-stage ABF ladder
/// (256 -> 512 -> 1024, equal thirds) and single-stage HARPE at 1024 with
/// searched bases.
pub fn trend_experiments(total_tokens: u64, seed: u64) -> Vec<ExperimentConfig> {
    let model = ModelSpec {
        vocab: vocab::SIZE,
        width: 128,
        n_layers: 4,
        n_heads: 8,
        max_context: 4096,
        init_std: d_init_std(),
    };
    let lr = 1e-3;
    let stage = |strategy, context_len, tokens| Stage {
        strategy,
        context_len,
        tokens,
        learning_rate: lr,
    };
    let schedule = |stages: Vec<Stage<StrategySpec>>| TrainSchedule {
        stages,
        ..TrainSchedule::single(stage(StrategySpec::Abf { base: 1.0 }, 1, 1))
    };
    let third = total_tokens / 3;
    let runs = [
        (
            "abf_single",
            vec![stage(StrategySpec::Abf { base: 5e4 }, 1024, total_tokens)],
        ),
        (
            "abf_multi",
            vec![
                stage(StrategySpec::Abf { base: 1e4 }, 256, third),
                stage(StrategySpec::Abf { base: 2e4 }, 512, third),
                stage(StrategySpec::Abf { base: 5e4 }, 1024, total_tokens - 2 * third),
            ],
        ),
        (
            "harpe",
            vec![stage(
                StrategySpec::Harpe {
                    bases_file: None,
                    bases: None,
                    search: Some(SearchSpec {
                        mode: SearchMode::Searched,
                        b_min: 1e4,
                        b_max: 5e4,
                        stride: Some(300.0),
                        max_distance: Some(1024),
                        smooth: None,
                    }),
                    order: HeadOrder::Ascending,
                },
                1024,
                total_tokens,
            )],
        ),
    ];
    runs.into_iter()
        .map(|(name, stages)| ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            name: name.to_string(),
            seed,
            model: model.clone(),
            schedule: schedule(stages),
            corpus: CorpusSpec::Niah {
                tasks: None,
                min_doc_frac: 0.25,
            },
            eval: Some(EvalSpec {
                tasks: TaskSelection::default(),
                lengths: vec![256, 512, 1024, 2048, 4096],
                seeds: 10,
                ppl: None,
            }),
            paths: Paths::default(),
        })
        .collect()
}
