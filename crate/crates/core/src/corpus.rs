//! Seeded synthetic corpora over a fixed 64-token vocabulary.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{HarpeError, Result};
use crate::eval::niah::{generate_niah, NiahTask};
use crate::seed::rng_for;

/// Token ids shared by every corpus and the needle generator.
pub mod vocab {
    /// `0..10` are the digits 0-9.
    pub const DIGIT_BASE: u32 = 0;
    pub const N_DIGITS: u32 = 10;
    /// Keys are written as two key tokens.
    pub const KEY_BASE: u32 = 10;
    pub const N_KEY_TOKENS: u32 = 24;
    /// "the special number for"
    pub const NEEDLE: u32 = 34;
    pub const IS: u32 = 35;
    pub const SEP: u32 = 36;
    /// "what is the number for"
    pub const QUERY: u32 = 37;
    pub const ANSWER: u32 = 38;
    pub const END: u32 = 39;
    pub const FILLER_BASE: u32 = 40;
    pub const N_FILLER: u32 = 24;
    pub const SIZE: usize = 64;

    pub fn digit(d: u32) -> u32 {
        DIGIT_BASE + d
    }

    pub fn is_digit(t: u32) -> bool {
        (DIGIT_BASE..DIGIT_BASE + N_DIGITS).contains(&t)
    }

    pub fn filler(i: u32) -> u32 {
        FILLER_BASE + i
    }

    pub fn key_token(i: u32) -> u32 {
        KEY_BASE + i
    }
}

fn default_order() -> usize {
    2
}
fn default_branching() -> usize {
    4
}
fn default_table_seed() -> u64 {
    0x5eed
}
fn default_min_doc_frac() -> f64 {
    0.25
}

/// Declarative description of a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSpec {
    /// Order-`k` Markov text over the filler words. Each history has
    /// `branching` possible successors with Dirichlet(1) weights drawn from
    /// `table_seed`.
    Markov {
        #[serde(default = "default_order")]
        order: usize,
        #[serde(default = "default_branching")]
        branching: usize,
        #[serde(default = "default_table_seed")]
        table_seed: u64,
    },
    /// The pattern repeated from phase 0.
    Periodic { pattern: Vec<u32> },
    /// Independent uniform tokens over the whole vocabulary.
    Uniform,
    /// Needle documents with their answers, packed back to back. Document
    /// lengths are uniform between `min_doc_frac * len` and what is left.
    Niah {
        #[serde(default)]
        tasks: Option<Vec<NiahTask>>,
        #[serde(default = "default_min_doc_frac")]
        min_doc_frac: f64,
    },
    /// Each sequence comes from one part, chosen with probability
    /// proportional to its weight.
    Mixture { parts: Vec<MixturePart> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixturePart {
    pub weight: f64,
    pub spec: CorpusSpec,
}

impl CorpusSpec {
    pub fn build(&self) -> Result<Corpus> {
        Ok(match self {
            CorpusSpec::Markov {
                order,
                branching,
                table_seed,
            } => Corpus::Markov(MarkovChain::new(*order, *branching, *table_seed)?),
            CorpusSpec::Periodic { pattern } => {
                if pattern.is_empty() {
                    return Err(HarpeError::invalid("periodic pattern must not be empty"));
                }
                if let Some(t) = pattern.iter().find(|&&t| t as usize >= vocab::SIZE) {
                    return Err(HarpeError::invalid(format!("token {t} outside vocabulary")));
                }
                Corpus::Periodic(pattern.clone())
            }
            CorpusSpec::Uniform => Corpus::Uniform,
            CorpusSpec::Niah {
                tasks,
                min_doc_frac,
            } => {
                if !(*min_doc_frac > 0.0 && *min_doc_frac <= 1.0) {
                    return Err(HarpeError::invalid("min_doc_frac must lie in (0, 1]"));
                }
                let tasks = tasks.clone().unwrap_or_else(|| NiahTask::ALL.to_vec());
                if tasks.is_empty() {
                    return Err(HarpeError::invalid("niah corpus needs at least one task"));
                }
                Corpus::Niah {
                    tasks,
                    min_doc_frac: *min_doc_frac,
                    filler: MarkovChain::standard(),
                }
            }
            CorpusSpec::Mixture { parts } => {
                if parts.is_empty() || parts.iter().any(|p| !(p.weight > 0.0)) {
                    return Err(HarpeError::invalid(
                        "mixture needs at least one part and positive weights",
                    ));
                }
                let built = parts
                    .iter()
                    .map(|p| Ok((p.weight, p.spec.build()?)))
                    .collect::<Result<Vec<_>>>()?;
                Corpus::Mixture(built)
            }
        })
    }
}

/// A built corpus that can sample token sequences.
#[derive(Debug, Clone)]
pub enum Corpus {
    Markov(MarkovChain),
    Periodic(Vec<u32>),
    Uniform,
    Niah {
        tasks: Vec<NiahTask>,
        min_doc_frac: f64,
        filler: MarkovChain,
    },
    Mixture(Vec<(f64, Corpus)>),
}

impl Corpus {
    /// Exactly `len` tokens.
    pub fn sample(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
        match self {
            Corpus::Markov(chain) => chain.sample(len, rng),
            Corpus::Periodic(p) => p.iter().copied().cycle().take(len).collect(),
            Corpus::Uniform => (0..len)
                .map(|_| rng.random_range(0..vocab::SIZE as u32))
                .collect(),
            Corpus::Niah {
                tasks,
                min_doc_frac,
                filler,
            } => sample_niah_docs(tasks, *min_doc_frac, filler, len, rng),
            Corpus::Mixture(parts) => {
                let total: f64 = parts.iter().map(|(w, _)| w).sum();
                let mut pick = rng.random::<f64>() * total;
                for (w, c) in parts {
                    if pick < *w {
                        return c.sample(len, rng);
                    }
                    pick -= w;
                }
                parts.last().unwrap().1.sample(len, rng)
            }
        }
    }

    /// A single long stream, reproducible from `seed`.
    pub fn stream(&self, len: usize, seed: u64) -> Vec<u32> {
        let mut rng = rng_for(seed, "corpus.stream");
        self.sample(len, &mut rng)
    }
}

fn sample_niah_docs(
    tasks: &[NiahTask],
    min_doc_frac: f64,
    filler: &MarkovChain,
    len: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let min_doc = ((len as f64 * min_doc_frac) as usize).max(1);
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let remaining = len - out.len();
        if remaining < min_doc {
            out.extend(filler.sample(remaining, rng));
            break;
        }
        let doc_len = rng.random_range(min_doc..=remaining);
        let task = tasks[rng.random_range(0..tasks.len())];
        let depth: f64 = rng.random();
        let case_seed: u64 = rng.random();
        let defaults = task.defaults(doc_len);
        let answer_len = task.answer_len(&defaults);
        let doc = doc_len
            .checked_sub(answer_len)
            .and_then(|prompt_len| {
                generate_niah(
                    task,
                    prompt_len,
                    depth,
                    defaults.n_needles,
                    defaults.n_distractors,
                    defaults.n_queries,
                    case_seed,
                )
                .ok()
            })
            .map(|case| {
                let mut toks = case.prompt();
                toks.extend(case.answer_tokens());
                toks
            });
        match doc {
            Some(toks) => out.extend(toks),
            None => out.extend(filler.sample(doc_len, rng)),
        }
    }
    out.truncate(len);
    out
}

/// Order-`k` Markov chain over the filler words.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    order: usize,
    /// Per history: (successor filler index, cumulative probability).
    table: Vec<Vec<(u32, f64)>>,
}

impl MarkovChain {
    pub fn new(order: usize, branching: usize, table_seed: u64) -> Result<Self> {
        let a = vocab::N_FILLER as usize;
        if order == 0 || order > 3 {
            return Err(HarpeError::invalid(format!("markov order must be 1..=3, got {order}")));
        }
        if branching == 0 || branching > a {
            return Err(HarpeError::invalid(format!(
                "branching must be 1..={a}, got {branching}"
            )));
        }
        let mut rng = rng_for(table_seed, "corpus.markov.table");
        let contexts = a.pow(order as u32);
        let table = (0..contexts)
            .map(|_| {
                let succ = sample_indices(&mut rng, a, branching).into_vec();
                let weights: Vec<f64> = (0..branching).map(|_| Exp1.sample(&mut rng)).collect();
                let total: f64 = weights.iter().sum();
                let mut acc = 0.0;
                succ.into_iter()
                    .zip(weights)
                    .map(|(s, w)| {
                        acc += w / total;
                        (s as u32, acc)
                    })
                    .collect()
            })
            .collect();
        Ok(Self { order, table })
    }

    /// The chain used for needle-haystack filler.
    pub fn standard() -> Self {
        Self::new(default_order(), default_branching(), default_table_seed()).unwrap()
    }

    pub fn order(&self) -> usize {
        self.order
    }

    fn context_index(&self, history: &[u32]) -> usize {
        history
            .iter()
            .fold(0, |acc, &t| acc * vocab::N_FILLER as usize + (t - vocab::FILLER_BASE) as usize)
    }

    pub fn sample(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let mut out: Vec<u32> = Vec::with_capacity(len);
        for _ in 0..len {
            let next = if out.len() < self.order {
                vocab::filler(rng.random_range(0..vocab::N_FILLER))
            } else {
                let ctx = self.context_index(&out[out.len() - self.order..]);
                let u: f64 = rng.random();
                let row = &self.table[ctx];
                let pick = row
                    .iter()
                    .find(|(_, c)| u < *c)
                    .unwrap_or_else(|| row.last().unwrap());
                vocab::filler(pick.0)
            };
            out.push(next);
        }
        out
    }

    /// Exact next-token distribution over the full vocabulary given the
    /// preceding tokens. Histories shorter than the order (or containing
    /// non-filler tokens) get the uniform filler distribution, which is
    /// what [`MarkovChain::sample`] uses to start a sequence.
    pub fn next_distribution(&self, history: &[u32]) -> Vec<f64> {
        let mut probs = vec![0.0; vocab::SIZE];
        let tail = history.len().checked_sub(self.order).map(|s| &history[s..]);
        let usable = tail.filter(|h| {
            h.iter()
                .all(|&t| (vocab::FILLER_BASE..vocab::FILLER_BASE + vocab::N_FILLER).contains(&t))
        });
        match usable {
            Some(h) => {
                let mut prev = 0.0;
                for &(s, c) in &self.table[self.context_index(h)] {
                    probs[vocab::filler(s) as usize] = c - prev;
                    prev = c;
                }
            }
            None => {
                for i in 0..vocab::N_FILLER {
                    probs[vocab::filler(i) as usize] = 1.0 / vocab::N_FILLER as f64;
                }
            }
        }
        probs
    }
}
