//! Staged (continual) pretraining.
//!
//! Each stage trains under its own positional strategy and context length;
//! parameters carry over, optimiser moments are reset at every boundary
//! unless `carry_optimizer_state` is set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::optim::{AdamHyper, AdamW};
use super::params::Params;
use super::transformer::Transformer;
use crate::attention::PositionalStrategy;
use crate::corpus::Corpus;
use crate::error::{HarpeError, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage<S = PositionalStrategy> {
    pub strategy: S,
    pub context_len: usize,
    /// Training tokens for this stage; rounded up to whole steps.
    pub tokens: u64,
    pub learning_rate: f64,
}

fn d_batch() -> usize {
    8
}
fn d_warmup() -> usize {
    50
}
fn d_min_lr_ratio() -> f64 {
    0.1
}
fn d_clip() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule<S = PositionalStrategy> {
    pub stages: Vec<Stage<S>>,
    #[serde(default)]
    pub optimizer: AdamHyper,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Linear warmup steps at the start of every stage.
    #[serde(default = "d_warmup")]
    pub warmup_steps: usize,
    /// Cosine decay floor as a fraction of the stage learning rate.
    #[serde(default = "d_min_lr_ratio")]
    pub min_lr_ratio: f64,
    /// Global gradient-norm clip; 0 disables.
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub carry_optimizer_state: bool,
}

impl<S> TrainSchedule<S> {
    pub fn single(stage: Stage<S>) -> Self {
        Self {
            stages: vec![stage],
            optimizer: AdamHyper::default(),
            batch_size: d_batch(),
            warmup_steps: d_warmup(),
            min_lr_ratio: d_min_lr_ratio(),
            grad_clip: d_clip(),
            carry_optimizer_state: false,
        }
    }

    /// Same schedule with each stage's strategy mapped through `f`.
    pub fn try_map<U, E>(
        &self,
        mut f: impl FnMut(&S) -> std::result::Result<U, E>,
    ) -> std::result::Result<TrainSchedule<U>, E> {
        let stages = self
            .stages
            .iter()
            .map(|s| {
                Ok(Stage {
                    strategy: f(&s.strategy)?,
                    context_len: s.context_len,
                    tokens: s.tokens,
                    learning_rate: s.learning_rate,
                })
            })
            .collect::<std::result::Result<_, E>>()?;
        Ok(TrainSchedule {
            stages,
            optimizer: self.optimizer,
            batch_size: self.batch_size,
            warmup_steps: self.warmup_steps,
            min_lr_ratio: self.min_lr_ratio,
            grad_clip: self.grad_clip,
            carry_optimizer_state: self.carry_optimizer_state,
        })
    }
}

impl TrainSchedule {
    pub fn validate(&self, max_context: usize, n_heads: usize) -> Result<()> {
        if self.stages.is_empty() {
            return Err(HarpeError::invalid("schedule has no stages"));
        }
        if self.batch_size == 0 {
            return Err(HarpeError::invalid("batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) || !(self.grad_clip >= 0.0) {
            return Err(HarpeError::invalid("min_lr_ratio must lie in [0, 1] and grad_clip be >= 0"));
        }
        let mut prev = 0;
        for (i, s) in self.stages.iter().enumerate() {
            if s.context_len < prev {
                return Err(HarpeError::invalid(format!(
                    "stage {i}: context {} shrinks from {prev}",
                    s.context_len
                )));
            }
            if s.context_len == 0 || s.context_len > max_context {
                return Err(HarpeError::invalid(format!(
                    "stage {i}: context {} outside 1..={max_context}",
                    s.context_len
                )));
            }
            if s.tokens == 0 || !(s.learning_rate > 0.0) {
                return Err(HarpeError::invalid(format!(
                    "stage {i}: tokens and learning_rate must be positive"
                )));
            }
            s.strategy.validate(n_heads)?;
            prev = s.context_len;
        }
        Ok(())
    }

    pub fn steps(&self, stage: &Stage) -> u64 {
        let per_step = (self.batch_size * stage.context_len) as u64;
        stage.tokens.div_ceil(per_step)
    }

    /// Learning rate at `step` (0-based) of a stage with `total` steps.
    pub fn learning_rate(&self, stage: &Stage, step: u64, total: u64) -> f64 {
        let peak = stage.learning_rate;
        let warm = (self.warmup_steps as u64).min(total / 2);
        if step < warm {
            return peak * (step + 1) as f64 / warm as f64;
        }
        let span = (total - warm).max(1) as f64;
        let t = (step - warm) as f64 / span;
        let floor = peak * self.min_lr_ratio;
        floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub tokens_seen: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCurve {
    pub stage: usize,
    pub strategy: String,
    pub context_len: usize,
    pub points: Vec<CurvePoint>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curves: Vec<StageCurve>,
}

impl TrainOutcome {
    /// `stage,step,tokens_seen,lr,loss` rows.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("stage,strategy,context_len,step,tokens_seen,lr,loss\n");
        for c in &self.curves {
            for p in &c.points {
                out.push_str(&format!(
                    "{},{},{},{},{},{:.6e},{:.6}\n",
                    c.stage, c.strategy, c.context_len, p.step, p.tokens_seen, p.lr, p.loss
                ));
            }
        }
        out
    }
}

/// Gradient of the mean loss over `batch`, plus that mean loss. Sequences
/// are differentiated independently and summed in batch order, so the
/// result does not depend on the thread count.
pub fn batch_gradient(model: &Transformer<f32>, batch: &[Vec<u32>]) -> Result<(f64, Params<f32>)> {
    let layout = model.params().layout().clone();
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<(f64, Params<f32>)> = batch
        .par_iter()
        .map(|seq| {
            let n = seq.len() - 1;
            let mut g = Params::zeros(layout.clone());
            let loss = model.loss_and_grads(&seq[..n], &seq[1..], &mut g, scale)?;
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let mut total = Params::zeros(layout);
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l * scale;
        for (a, b) in total.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *a += b;
        }
    }
    Ok((loss, total))
}

fn clip(grads: &mut Params<f32>, max_norm: f64) {
    let norm = grads.l2_norm();
    if max_norm > 0.0 && norm > max_norm {
        let f = (max_norm / norm) as f32;
        grads.as_mut_slice().iter_mut().for_each(|g| *g *= f);
    }
}

/// Runs every stage of `schedule` starting from `checkpoint`. Training
/// sequences for stage `i` come from `corpus` seeded by
/// `(corpus_seed, "train.stage{i}")`.
pub fn run_schedule(
    checkpoint: Checkpoint,
    schedule: &TrainSchedule,
    corpus: &Corpus,
    corpus_seed: u64,
) -> Result<TrainOutcome> {
    let Checkpoint {
        mut config,
        params,
        mut state,
        optimizer,
    } = checkpoint;
    schedule.validate(config.max_context, config.n_heads)?;
    config.strategy = schedule.stages[0].strategy.clone();
    let mut model = Transformer::new(config.clone(), params, schedule.stages[0].context_len)?;
    let layout = model.params().layout().clone();
    let mut opt = optimizer
        .filter(|_| schedule.carry_optimizer_state)
        .unwrap_or_else(|| AdamW::new(layout.clone(), schedule.optimizer));
    let mut curves = Vec::new();

    for (i, stage) in schedule.stages.iter().enumerate() {
        model.set_positional(stage.strategy.clone(), stage.context_len)?;
        if i > 0 && !schedule.carry_optimizer_state {
            opt = AdamW::new(layout.clone(), schedule.optimizer);
        }
        let total = schedule.steps(stage);
        let mut rng = rng_for(corpus_seed, &format!("train.stage{i}"));
        let mut curve = StageCurve {
            stage: i,
            strategy: stage.strategy.label(),
            context_len: stage.context_len,
            points: Vec::with_capacity(total as usize),
        };
        log::info!(
            "stage {i}: {} ctx {} for {total} steps",
            curve.strategy,
            stage.context_len
        );
        for step in 0..total {
            let batch: Vec<Vec<u32>> = (0..schedule.batch_size)
                .map(|_| corpus.sample(stage.context_len + 1, &mut rng))
                .collect();
            let (loss, mut grads) = batch_gradient(&model, &batch)?;
            if !loss.is_finite() {
                return Err(HarpeError::invalid(format!(
                    "stage {i} step {step}: loss became {loss}"
                )));
            }
            clip(&mut grads, schedule.grad_clip);
            let lr = schedule.learning_rate(stage, step, total);
            opt.update(model.params_mut(), &grads, lr);
            state.step += 1;
            state.tokens_seen += (schedule.batch_size * stage.context_len) as u64;
            curve.points.push(CurvePoint {
                step: state.step,
                tokens_seen: state.tokens_seen,
                lr,
                loss,
            });
            if step % 50 == 0 || step + 1 == total {
                log::info!("stage {i} step {}/{total} loss {loss:.4}", step + 1);
            }
        }
        state.stages_done += 1;
        curves.push(curve);
    }

    let config = model.config().clone();
    let params = model.into_params();
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config,
            params,
            state,
            optimizer: Some(opt),
        },
        curves,
    })
}
