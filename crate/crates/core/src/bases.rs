//! Per-head base sets.
//!
//! Two ways to pick one RoPE base per attention head:
//!
//! * [`uniform_bases`] spaces `N` bases evenly over `[b_min, b_max]`.
//! * [`search_bases`] greedily grows a set seeded with `b_min`, each round
//!   adding the candidate whose attention waveform peaks sit closest to the
//!   valleys accumulated so far (and whose valleys sit closest to the
//!   accumulated peaks).
//!
//! The waveform of a base is `h(s) = (2/d) * sum_i cos(s * theta_i)`, the
//! rotated inner product of an identical unit query/key pair at distance `s`.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HarpeError, Result};
use crate::rope::compute_theta;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Uniform,
    Candidates,
    Searched,
    Explicit,
}

/// Ordered list of RoPE bases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseSet {
    bases: Vec<f64>,
    provenance: Provenance,
}

impl BaseSet {
    /// Wraps caller-supplied bases. Every base must be positive and finite.
    pub fn explicit(bases: Vec<f64>) -> Result<Self> {
        if bases.is_empty() {
            return Err(HarpeError::invalid("base set must not be empty"));
        }
        if let Some(b) = bases.iter().find(|b| !(**b > 0.0) || !b.is_finite()) {
            return Err(HarpeError::invalid(format!(
                "bases must be positive and finite, got {b}"
            )));
        }
        Ok(Self {
            bases,
            provenance: Provenance::Explicit,
        })
    }

    /// Same bases with a different provenance tag.
    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn bases(&self) -> &[f64] {
        &self.bases
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }

    /// Same bases, ascending.
    pub fn sorted(&self) -> Vec<f64> {
        let mut out = self.bases.clone();
        out.sort_by(f64::total_cmp);
        out
    }
}

/// `b_min + h * (b_max - b_min) / (N - 1)` for `h = 0..N`.
pub fn uniform_bases(b_min: f64, b_max: f64, n_heads: usize) -> Result<BaseSet> {
    check_range(b_min, b_max)?;
    if n_heads < 2 {
        return Err(HarpeError::invalid(format!(
            "uniform spacing needs at least 2 heads, got {n_heads}"
        )));
    }
    let step = (b_max - b_min) / (n_heads - 1) as f64;
    let mut bases: Vec<f64> = (0..n_heads).map(|h| b_min + h as f64 * step).collect();
    // pin the upper endpoint against accumulated rounding
    bases[n_heads - 1] = b_max;
    Ok(BaseSet {
        bases,
        provenance: Provenance::Uniform,
    })
}

/// `b_min + i * stride` for `i = 1..=floor((b_max - b_min) / stride)`.
///
/// `b_min` itself is not a candidate; the search seeds with it separately.
pub fn candidate_bases(b_min: f64, b_max: f64, stride: f64) -> Result<BaseSet> {
    check_range(b_min, b_max)?;
    let range = b_max - b_min;
    if !(stride > 0.0) || stride > range {
        return Err(HarpeError::invalid(format!(
            "stride must lie in (0, {range}], got {stride}"
        )));
    }
    // tolerate representation error when the ratio is integral
    let ratio = range / stride;
    let count = if (ratio - ratio.round()).abs() < 1e-9 * ratio.max(1.0) {
        ratio.round() as usize
    } else {
        ratio.floor() as usize
    };
    let bases = (1..=count).map(|i| b_min + i as f64 * stride).collect();
    Ok(BaseSet {
        bases,
        provenance: Provenance::Candidates,
    })
}

fn check_range(b_min: f64, b_max: f64) -> Result<()> {
    if !(b_min > 0.0) || !b_max.is_finite() {
        return Err(HarpeError::invalid(format!(
            "b_min must be positive and b_max finite, got [{b_min}, {b_max}]"
        )));
    }
    if !(b_max > b_min) {
        return Err(HarpeError::invalid(format!(
            "b_max ({b_max}) must exceed b_min ({b_min})"
        )));
    }
    Ok(())
}

/// Strict interior local maxima and minima of a sampled curve.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extrema {
    pub peaks: Vec<usize>,
    pub valleys: Vec<usize>,
}

impl Extrema {
    pub fn is_usable(&self) -> bool {
        !self.peaks.is_empty() && !self.valleys.is_empty()
    }
}

/// Finds indices strictly above (peaks) or below (valleys) both neighbours.
/// Endpoints are never extrema and plateaus produce none.
pub fn extract_extrema(values: &[f64]) -> Result<Extrema> {
    if values.len() < 3 {
        return Err(HarpeError::invalid(format!(
            "need at least 3 samples to locate extrema, got {}",
            values.len()
        )));
    }
    let mut out = Extrema::default();
    for (i, w) in values.windows(3).enumerate() {
        if w[1] > w[0] && w[1] > w[2] {
            out.peaks.push(i + 1);
        } else if w[1] < w[0] && w[1] < w[2] {
            out.valleys.push(i + 1);
        }
    }
    Ok(out)
}

/// Attention-decay curve of one base on the integer grid `0..=max_distance`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub base: f64,
    pub head_dim: usize,
    pub values: Vec<f64>,
    pub peaks: Vec<usize>,
    pub valleys: Vec<usize>,
}

impl Waveform {
    pub fn max_distance(&self) -> usize {
        self.values.len() - 1
    }

    pub fn extrema(&self) -> Extrema {
        Extrema {
            peaks: self.peaks.clone(),
            valleys: self.valleys.clone(),
        }
    }

    /// First distance at which the curve is no longer positive.
    pub fn first_zero_crossing(&self) -> Option<usize> {
        self.values.iter().position(|&v| v <= 0.0)
    }
}

pub fn compute_waveform(base: f64, head_dim: usize, max_distance: usize) -> Result<Waveform> {
    compute_waveform_with(base, head_dim, max_distance, None)
}

/// Like [`compute_waveform`], optionally smoothing with a centred moving
/// average of the given odd width before extrema are located.
pub fn compute_waveform_with(
    base: f64,
    head_dim: usize,
    max_distance: usize,
    smoothing: Option<usize>,
) -> Result<Waveform> {
    if max_distance < 2 {
        return Err(HarpeError::invalid(format!(
            "max_distance must be at least 2, got {max_distance}"
        )));
    }
    let angles = compute_theta(base, head_dim)?;
    let scale = 2.0 / head_dim as f64;
    let mut values: Vec<f64> = (0..=max_distance)
        .map(|s| {
            let s = s as f64;
            angles.angles().iter().map(|&t| (s * t).cos()).sum::<f64>() * scale
        })
        .collect();
    if let Some(width) = smoothing.filter(|&w| w > 1) {
        values = moving_average(&values, width);
    }
    let Extrema { peaks, valleys } = extract_extrema(&values)?;
    Ok(Waveform {
        base,
        head_dim,
        values,
        peaks,
        valleys,
    })
}

fn moving_average(values: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    let n = values.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Distance from `x` to the closest element of a sorted, non-empty list.
fn nearest_gap(sorted: &[usize], x: usize) -> u64 {
    let idx = sorted.partition_point(|&v| v < x);
    let mut best = u64::MAX;
    if idx < sorted.len() {
        best = (sorted[idx] - x) as u64;
    }
    if idx > 0 {
        best = best.min((x - sorted[idx - 1]) as u64);
    }
    best
}

/// `d+ + d-` with nearest-neighbour matching, in exact integer arithmetic.
fn complement_score(candidate: &Extrema, sel_peaks: &[usize], sel_valleys: &[usize]) -> u64 {
    let d_plus: u64 = candidate
        .peaks
        .iter()
        .map(|&p| nearest_gap(sel_valleys, p))
        .sum();
    let d_minus: u64 = candidate
        .valleys
        .iter()
        .map(|&v| nearest_gap(sel_peaks, v))
        .sum();
    d_plus + d_minus
}

/// Sum over the candidate's peaks of the gap to the nearest selected valley,
/// plus the sum over its valleys of the gap to the nearest selected peak.
///
/// `selected_peaks` and `selected_valleys` need not be sorted.
pub fn complement_distance(
    candidate: &Waveform,
    selected_peaks: &[usize],
    selected_valleys: &[usize],
) -> Result<f64> {
    if candidate.peaks.is_empty() || candidate.valleys.is_empty() {
        return Err(HarpeError::invalid(format!(
            "waveform for base {} has no {} on its grid",
            candidate.base,
            if candidate.peaks.is_empty() { "peaks" } else { "valleys" }
        )));
    }
    if selected_peaks.is_empty() || selected_valleys.is_empty() {
        return Err(HarpeError::invalid(
            "selected peak and valley lists must be non-empty",
        ));
    }
    let mut sp = selected_peaks.to_vec();
    let mut sv = selected_valleys.to_vec();
    sp.sort_unstable();
    sv.sort_unstable();
    Ok(complement_score(&candidate.extrema(), &sp, &sv) as f64)
}

fn merge_sorted(acc: &mut Vec<usize>, add: &[usize]) {
    acc.extend_from_slice(add);
    acc.sort_unstable();
    acc.dedup();
}

/// Greedy peak/valley complementarity search over pre-computed extrema.
///
/// `pool` holds `(base, extrema)` pairs. Candidates without a peak or a
/// valley are skipped with a warning, as is any candidate equal to the seed.
/// Each round the candidate with the smallest complement score joins the
/// set (ties go to the smaller base) and leaves the pool. Returns bases in
/// selection order, seed first.
pub fn search_with_extrema(
    seed_base: f64,
    seed: &Extrema,
    pool: Vec<(f64, Extrema)>,
    n_heads: usize,
) -> Result<Vec<f64>> {
    if n_heads == 0 {
        return Err(HarpeError::invalid("n_heads must be at least 1"));
    }
    let mut selected = vec![seed_base];
    if n_heads == 1 {
        return Ok(selected);
    }
    if !seed.is_usable() {
        return Err(HarpeError::invalid(format!(
            "waveform for seed base {seed_base} has no peaks or no valleys on its grid"
        )));
    }

    let mut pool: Vec<(f64, Extrema)> = pool
        .into_iter()
        .filter(|(base, ext)| {
            if *base == seed_base {
                return false;
            }
            if !ext.is_usable() {
                warn!("skipping candidate base {base}: waveform has no peaks or no valleys");
                return false;
            }
            true
        })
        .collect();
    if pool.len() < n_heads - 1 {
        return Err(HarpeError::InsufficientCandidates {
            needed: n_heads - 1,
            available: pool.len(),
        });
    }

    let mut acc_peaks = seed.peaks.clone();
    let mut acc_valleys = seed.valleys.clone();
    acc_peaks.sort_unstable();
    acc_peaks.dedup();
    acc_valleys.sort_unstable();
    acc_valleys.dedup();

    while selected.len() < n_heads {
        let scores: Vec<u64> = pool
            .par_iter()
            .map(|(_, ext)| complement_score(ext, &acc_peaks, &acc_valleys))
            .collect();
        let (winner, _) = scores
            .iter()
            .enumerate()
            .min_by(|(i, a), (j, b)| a.cmp(b).then(pool[*i].0.total_cmp(&pool[*j].0)))
            .expect("pool is non-empty");
        let (base, ext) = pool.remove(winner);
        merge_sorted(&mut acc_peaks, &ext.peaks);
        merge_sorted(&mut acc_valleys, &ext.valleys);
        selected.push(base);
    }
    Ok(selected)
}

/// Runs the complementarity search on real waveforms.
///
/// The result keeps selection order; use [`BaseSet::sorted`] for an
/// ascending head assignment.
pub fn search_bases(
    candidates: &BaseSet,
    b_min: f64,
    n_heads: usize,
    head_dim: usize,
    max_distance: usize,
) -> Result<BaseSet> {
    search_bases_with(candidates, b_min, n_heads, head_dim, max_distance, None)
}

pub fn search_bases_with(
    candidates: &BaseSet,
    b_min: f64,
    n_heads: usize,
    head_dim: usize,
    max_distance: usize,
    smoothing: Option<usize>,
) -> Result<BaseSet> {
    if n_heads > 1 && candidates.is_empty() {
        return Err(HarpeError::InsufficientCandidates {
            needed: n_heads - 1,
            available: 0,
        });
    }
    let seed = compute_waveform_with(b_min, head_dim, max_distance, smoothing)?;
    if n_heads <= 1 {
        let bases = search_with_extrema(b_min, &seed.extrema(), Vec::new(), n_heads)?;
        return Ok(BaseSet {
            bases,
            provenance: Provenance::Searched,
        });
    }
    let pool = candidates
        .bases()
        .par_iter()
        .map(|&b| {
            compute_waveform_with(b, head_dim, max_distance, smoothing).map(|w| {
                let ext = w.extrema();
                (b, ext)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bases = search_with_extrema(b_min, &seed.extrema(), pool, n_heads)?;
    Ok(BaseSet {
        bases,
        provenance: Provenance::Searched,
    })
}
