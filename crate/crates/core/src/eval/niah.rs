//! Synthetic needle-in-a-haystack cases and their scoring.
//!
//! A needle is `NEEDLE k0 k1 IS d1 .. dL SEP`; the query scaffold closing
//! the prompt is `QUERY k0 k1 [k0' k1' ..] ANSWER`. The expected answer is
//! the queried values joined by `SEP` and terminated by `END`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{vocab, MarkovChain};
use crate::error::{HarpeError, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NiahTask {
    #[serde(rename = "niah_single_1")]
    Single1,
    #[serde(rename = "niah_single_2")]
    Single2,
    #[serde(rename = "niah_single_3")]
    Single3,
    #[serde(rename = "niah_multikey_1")]
    Multikey1,
    #[serde(rename = "niah_multikey_2")]
    Multikey2,
    #[serde(rename = "niah_multikey_3")]
    Multikey3,
    #[serde(rename = "niah_multivalue")]
    Multivalue,
    #[serde(rename = "niah_multiquery")]
    Multiquery,
}

/// Default counts for a task at a given prompt length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskDefaults {
    pub n_needles: usize,
    pub n_distractors: usize,
    pub n_queries: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Haystack {
    /// One fixed filler phrase repeated.
    Repeated,
    /// The standard Markov chain.
    Markov,
}

impl NiahTask {
    pub const ALL: [NiahTask; 8] = [
        NiahTask::Single1,
        NiahTask::Single2,
        NiahTask::Single3,
        NiahTask::Multikey1,
        NiahTask::Multikey2,
        NiahTask::Multikey3,
        NiahTask::Multivalue,
        NiahTask::Multiquery,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NiahTask::Single1 => "niah_single_1",
            NiahTask::Single2 => "niah_single_2",
            NiahTask::Single3 => "niah_single_3",
            NiahTask::Multikey1 => "niah_multikey_1",
            NiahTask::Multikey2 => "niah_multikey_2",
            NiahTask::Multikey3 => "niah_multikey_3",
            NiahTask::Multivalue => "niah_multivalue",
            NiahTask::Multiquery => "niah_multiquery",
        }
    }

    pub fn is_single(self) -> bool {
        matches!(self, NiahTask::Single1 | NiahTask::Single2 | NiahTask::Single3)
    }

    pub fn is_multikey(self) -> bool {
        matches!(self, NiahTask::Multikey1 | NiahTask::Multikey2 | NiahTask::Multikey3)
    }

    pub fn value_len(self) -> usize {
        match self {
            NiahTask::Single3 | NiahTask::Multikey3 => 8,
            _ => 6,
        }
    }

    fn haystack(self) -> Haystack {
        match self {
            NiahTask::Single1 => Haystack::Repeated,
            _ => Haystack::Markov,
        }
    }

    /// Distractor keys share their first token with a needle key.
    fn hard_keys(self) -> bool {
        self == NiahTask::Multikey3
    }

    pub fn defaults(self, total_len: usize) -> TaskDefaults {
        let (n_needles, n_distractors, n_queries) = match self {
            NiahTask::Single1 | NiahTask::Single2 | NiahTask::Single3 => (1, 0, 1),
            NiahTask::Multikey1 => (1, 3, 1),
            NiahTask::Multikey2 | NiahTask::Multikey3 => (1, (total_len / 32).max(3), 1),
            NiahTask::Multivalue => (4, 0, 1),
            NiahTask::Multiquery => (4, 0, 4),
        };
        TaskDefaults {
            n_needles,
            n_distractors,
            n_queries,
        }
    }

    /// Tokens in the expected answer, including separators and `END`.
    pub fn answer_len(self, d: &TaskDefaults) -> usize {
        let values = if self == NiahTask::Multivalue {
            d.n_needles
        } else {
            d.n_queries
        };
        values * (self.value_len() + 1)
    }

    fn check_counts(self, n_needles: usize, n_distractors: usize, n_queries: usize) -> Result<()> {
        let ok = match self {
            NiahTask::Single1 | NiahTask::Single2 | NiahTask::Single3 => {
                n_needles == 1 && n_queries == 1 && n_distractors == 0
            }
            NiahTask::Multikey1 | NiahTask::Multikey2 | NiahTask::Multikey3 => {
                n_needles == 1 && n_queries == 1 && n_distractors >= 1
            }
            NiahTask::Multivalue => n_needles > 1 && n_queries == 1,
            NiahTask::Multiquery => n_queries > 1 && n_needles >= n_queries,
        };
        if ok {
            Ok(())
        } else {
            Err(HarpeError::invalid(format!(
                "{}: invalid counts needles={n_needles} distractors={n_distractors} queries={n_queries}",
                self.name()
            )))
        }
    }
}

impl fmt::Display for NiahTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NiahTask {
    type Err = HarpeError;

    fn from_str(s: &str) -> Result<Self> {
        NiahTask::ALL
            .into_iter()
            .find(|t| t.name() == s || t.name().trim_start_matches("niah_") == s)
            .ok_or_else(|| HarpeError::invalid(format!("unknown task {s:?}")))
    }
}

/// Parses `all` or a comma-separated task list.
pub fn parse_tasks(s: &str) -> Result<Vec<NiahTask>> {
    if s.trim() == "all" {
        return Ok(NiahTask::ALL.to_vec());
    }
    s.split(',').map(|t| t.trim().parse()).collect()
}

pub type Key = [u32; 2];

/// A key/value sentence and where it sits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub key: Key,
    pub value: Vec<u32>,
    /// Index of the first token of the sentence in the haystack.
    pub start: usize,
    /// Number of filler tokens preceding the sentence.
    pub filler_offset: usize,
}

impl Placement {
    pub fn tokens(&self) -> Vec<u32> {
        needle_tokens(self.key, &self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiahCase {
    pub task: NiahTask,
    pub seed: u64,
    pub depth_fraction: f64,
    pub total_len: usize,
    pub haystack: Vec<u32>,
    pub needles: Vec<Placement>,
    pub distractors: Vec<Placement>,
    pub queries: Vec<Key>,
    /// Filler tokens in the haystack.
    pub filler_len: usize,
}

pub fn needle_tokens(key: Key, value: &[u32]) -> Vec<u32> {
    let mut t = vec![vocab::NEEDLE, key[0], key[1], vocab::IS];
    t.extend_from_slice(value);
    t.push(vocab::SEP);
    t
}

impl NiahCase {
    /// Haystack followed by the query scaffold; exactly `total_len` tokens.
    pub fn prompt(&self) -> Vec<u32> {
        let mut p = self.haystack.clone();
        p.extend(scaffold(&self.queries));
        p
    }

    /// Values the answer must contain, in answer order.
    pub fn targets(&self) -> Vec<&[u32]> {
        if self.task == NiahTask::Multivalue {
            self.needles.iter().map(|n| n.value.as_slice()).collect()
        } else {
            self.queries
                .iter()
                .map(|q| {
                    self.needles
                        .iter()
                        .find(|n| n.key == *q)
                        .map(|n| n.value.as_slice())
                        .expect("every query names a needle")
                })
                .collect()
        }
    }

    /// The ideal continuation of the prompt.
    pub fn answer_tokens(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for (i, v) in self.targets().into_iter().enumerate() {
            if i > 0 {
                out.push(vocab::SEP);
            }
            out.extend_from_slice(v);
        }
        out.push(vocab::END);
        out
    }

    /// Decoding budget: answer length plus 8.
    pub fn max_new_tokens(&self) -> usize {
        self.answer_tokens().len() + 8
    }

    /// Depth at which needle `i` was requested.
    pub fn needle_depth(&self, i: usize) -> f64 {
        needle_depth(self.depth_fraction, i, self.needles.len())
    }
}

fn scaffold(queries: &[Key]) -> Vec<u32> {
    let mut s = vec![vocab::QUERY];
    for q in queries {
        s.extend_from_slice(q);
    }
    s.push(vocab::ANSWER);
    s
}

/// Needle 0 sits at `depth`; the rest are spread evenly over `[depth, 1]`.
fn needle_depth(depth: f64, i: usize, n: usize) -> f64 {
    depth + (1.0 - depth) * i as f64 / n as f64
}

const REPEATED_PHRASE: [u32; 9] = [0, 1, 2, 3, 4, 2, 5, 6, 7];

fn filler(kind: Haystack, len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    match kind {
        Haystack::Repeated => REPEATED_PHRASE
            .iter()
            .map(|&i| vocab::filler(i))
            .cycle()
            .take(len)
            .collect(),
        Haystack::Markov => {
            thread_local! {
                static CHAIN: MarkovChain = MarkovChain::standard();
            }
            CHAIN.with(|c| c.sample(len, rng))
        }
    }
}

fn random_key(rng: &mut ChaCha8Rng) -> Key {
    [
        vocab::key_token(rng.random_range(0..vocab::N_KEY_TOKENS)),
        vocab::key_token(rng.random_range(0..vocab::N_KEY_TOKENS)),
    ]
}

fn random_value(len: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..len)
        .map(|_| vocab::digit(rng.random_range(0..vocab::N_DIGITS)))
        .collect()
}

/// Builds one case. `total_len` is the full prompt length (haystack plus
/// query scaffold).
pub fn generate_niah(
    task: NiahTask,
    total_len: usize,
    depth_fraction: f64,
    n_needles: usize,
    n_distractors: usize,
    n_queries: usize,
    seed: u64,
) -> Result<NiahCase> {
    task.check_counts(n_needles, n_distractors, n_queries)?;
    if !(0.0..=1.0).contains(&depth_fraction) {
        return Err(HarpeError::invalid(format!(
            "depth fraction {depth_fraction} outside [0, 1]"
        )));
    }
    let n_keys = (vocab::N_KEY_TOKENS * vocab::N_KEY_TOKENS) as usize;
    let distinct_keys = if task == NiahTask::Multivalue { 1 } else { n_needles };
    if distinct_keys + n_distractors > n_keys {
        return Err(HarpeError::invalid(format!(
            "{} key phrases requested, only {n_keys} exist",
            distinct_keys + n_distractors
        )));
    }
    let value_len = task.value_len();
    let sentence = value_len + 5;
    let scaffold_len = 2 + 2 * n_queries;
    let fixed = (n_needles + n_distractors) * sentence + scaffold_len;
    let filler_len = total_len.checked_sub(fixed).ok_or_else(|| {
        HarpeError::invalid(format!(
            "{}: total_len {total_len} cannot hold {fixed} needle and query tokens",
            task.name()
        ))
    })?;

    let mut rng = rng_for(seed, task.name());

    // keys: needle keys first, then distractor keys disjoint from them
    let mut keys: Vec<Key> = Vec::new();
    while keys.len() < distinct_keys {
        let k = random_key(&mut rng);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let needle_keys: Vec<Key> = (0..n_needles)
        .map(|i| keys[i.min(distinct_keys - 1)])
        .collect();
    let mut distractor_keys: Vec<Key> = Vec::new();
    let mut hard_pool: Vec<Key> = if task.hard_keys() {
        let mut pool: Vec<Key> = (0..vocab::N_KEY_TOKENS)
            .map(|j| [keys[0][0], vocab::key_token(j)])
            .filter(|k| !keys.contains(k))
            .collect();
        pool.shuffle(&mut rng);
        pool
    } else {
        Vec::new()
    };
    while distractor_keys.len() < n_distractors {
        let k = hard_pool.pop().unwrap_or_else(|| random_key(&mut rng));
        if !keys.contains(&k) && !distractor_keys.contains(&k) {
            distractor_keys.push(k);
        }
    }

    // values: unique across the case
    let mut values: Vec<Vec<u32>> = Vec::new();
    while values.len() < n_needles + n_distractors {
        let v = random_value(value_len, &mut rng);
        if !values.contains(&v) {
            values.push(v);
        }
    }
    let distractor_values = values.split_off(n_needles);

    let fill = filler(task.haystack(), filler_len, &mut rng);

    // (filler offset, order, key, value, is_needle)
    let mut items: Vec<(usize, usize, Key, Vec<u32>, bool)> = Vec::new();
    for (i, (k, v)) in needle_keys.iter().zip(&values).enumerate() {
        let d = needle_depth(depth_fraction, i, n_needles);
        let off = ((d * filler_len as f64).floor() as usize).min(filler_len);
        items.push((off, i, *k, v.clone(), true));
    }
    for (j, (k, v)) in distractor_keys.iter().zip(distractor_values).enumerate() {
        let off = rng.random_range(0..=filler_len);
        items.push((off, n_needles + j, *k, v, false));
    }
    items.sort_by_key(|it| (it.0, it.1));

    let mut haystack = Vec::with_capacity(total_len);
    let mut needles = Vec::new();
    let mut distractors = Vec::new();
    let mut consumed = 0;
    for (off, order, key, value, is_needle) in items {
        haystack.extend_from_slice(&fill[consumed..off]);
        consumed = off;
        let placement = Placement {
            key,
            start: haystack.len(),
            filler_offset: off,
            value,
        };
        haystack.extend(placement.tokens());
        if is_needle {
            needles.push((order, placement));
        } else {
            distractors.push(placement);
        }
    }
    haystack.extend_from_slice(&fill[consumed..]);
    needles.sort_by_key(|(order, _)| *order);
    let needles: Vec<Placement> = needles.into_iter().map(|(_, p)| p).collect();

    let queries: Vec<Key> = if task == NiahTask::Multivalue {
        vec![needles[0].key]
    } else {
        needles.iter().take(n_queries).map(|n| n.key).collect()
    };

    let case = NiahCase {
        task,
        seed,
        depth_fraction,
        total_len,
        haystack,
        needles,
        distractors,
        queries,
        filler_len,
    };
    debug_assert_eq!(case.prompt().len(), total_len);
    Ok(case)
}

/// Case with the task's default counts.
pub fn generate_default(task: NiahTask, total_len: usize, depth_fraction: f64, seed: u64) -> Result<NiahCase> {
    let d = task.defaults(total_len);
    generate_niah(
        task,
        total_len,
        depth_fraction,
        d.n_needles,
        d.n_distractors,
        d.n_queries,
        seed,
    )
}

fn contains_subsequence(hay: &[u32], needle: &[u32]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// `100 * matched / required`, where a target counts as matched when its
/// digit string occurs contiguously in the output.
pub fn score_niah(case: &NiahCase, output: &[u32]) -> f64 {
    let targets = case.targets();
    let matched = targets
        .iter()
        .filter(|t| contains_subsequence(output, t))
        .count();
    100.0 * matched as f64 / targets.len() as f64
}
