//! Multi-head causal attention parameterised by a positional strategy.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::bases::BaseSet;
use crate::error::{HarpeError, Result};
use crate::rope::{compute_theta, RopeTable, RotationAngles};
use crate::Real;

/// Query rows per block in the causal kernels.
const BLOCK: usize = 64;

/// How a HARPE base set is laid out over heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadOrder {
    /// Head 0 gets the smallest base.
    #[default]
    Ascending,
    /// Head 0 gets the largest base.
    Descending,
    /// Bases are used in the order the set stores them.
    Selection,
}

/// Positional scheme applied to queries and keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PositionalStrategy {
    /// Plain RoPE with one shared base.
    Vanilla { base: f64 },
    /// Adjusted base frequency. Same math as `Vanilla`; the distinction is
    /// the larger base chosen for context extension.
    Abf { base: f64 },
    /// Position interpolation: positions are divided by `scale`.
    Pi { scale: f64, base: f64 },
    /// One base per head.
    Harpe { bases: BaseSet, order: HeadOrder },
}

impl PositionalStrategy {
    pub fn validate(&self, n_heads: usize) -> Result<()> {
        match self {
            Self::Vanilla { base } | Self::Abf { base } => check_base(*base),
            Self::Pi { scale, base } => {
                if !(*scale >= 1.0) || !scale.is_finite() {
                    return Err(HarpeError::invalid(format!(
                        "interpolation scale must be >= 1, got {scale}"
                    )));
                }
                check_base(*base)
            }
            Self::Harpe { bases, .. } => {
                if bases.len() != n_heads {
                    return Err(HarpeError::invalid(format!(
                        "HARPE base set has {} bases for {} heads",
                        bases.len(),
                        n_heads
                    )));
                }
                bases.bases().iter().try_for_each(|b| check_base(*b))
            }
        }
    }

    /// Divisor applied to integer positions before rotation.
    pub fn position_scale(&self) -> f64 {
        match self {
            Self::Pi { scale, .. } => *scale,
            _ => 1.0,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Vanilla { base } => format!("rope(b={base})"),
            Self::Abf { base } => format!("abf(b={base})"),
            Self::Pi { scale, base } => format!("pi(s={scale},b={base})"),
            Self::Harpe { bases, order } => {
                let order = match order {
                    HeadOrder::Ascending => "asc",
                    HeadOrder::Descending => "desc",
                    HeadOrder::Selection => "sel",
                };
                format!("harpe(n={},{order})", bases.len())
            }
        }
    }

    /// Base used by each head, in head order.
    pub fn head_bases(&self, n_heads: usize) -> Result<Vec<f64>> {
        self.validate(n_heads)?;
        Ok(match self {
            Self::Vanilla { base } | Self::Abf { base } | Self::Pi { base, .. } => {
                vec![*base; n_heads]
            }
            Self::Harpe { bases, order } => match order {
                HeadOrder::Ascending => bases.sorted(),
                HeadOrder::Descending => {
                    let mut b = bases.sorted();
                    b.reverse();
                    b
                }
                HeadOrder::Selection => bases.bases().to_vec(),
            },
        })
    }
}

fn check_base(base: f64) -> Result<()> {
    if base > 0.0 && base.is_finite() {
        Ok(())
    } else {
        Err(HarpeError::invalid(format!(
            "RoPE base must be positive and finite, got {base}"
        )))
    }
}

/// Per-head rotation angles for a strategy.
pub fn head_angles(
    strategy: &PositionalStrategy,
    n_heads: usize,
    head_dim: usize,
) -> Result<Vec<RotationAngles>> {
    strategy
        .head_bases(n_heads)?
        .into_iter()
        .map(|b| compute_theta(b, head_dim))
        .collect()
}

/// Interpolation scale that maps `target_len` positions into `trained_len`.
pub fn pi_scale_for(target_len: usize, trained_len: usize) -> Result<f64> {
    if trained_len == 0 || target_len < trained_len {
        return Err(HarpeError::invalid(format!(
            "target length {target_len} must be >= trained length {trained_len} > 0"
        )));
    }
    Ok(target_len as f64 / trained_len as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub head_dim: usize,
    pub context_len: usize,
    pub strategy: PositionalStrategy,
}

impl AttentionConfig {
    pub fn new(
        n_heads: usize,
        head_dim: usize,
        context_len: usize,
        strategy: PositionalStrategy,
    ) -> Result<Self> {
        if n_heads == 0 || head_dim == 0 || head_dim % 2 != 0 {
            return Err(HarpeError::invalid(format!(
                "need n_heads > 0 and an even head_dim, got {n_heads} x {head_dim}"
            )));
        }
        strategy.validate(n_heads)?;
        Ok(Self {
            n_heads,
            head_dim,
            context_len,
            strategy,
        })
    }

    pub fn model_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn logit_scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }

    /// Cos/sin tables for every head covering positions `0..len`.
    pub fn tables<T: Real>(&self, len: usize) -> Result<Vec<RopeTable<T>>> {
        let scale = self.strategy.position_scale();
        Ok(head_angles(&self.strategy, self.n_heads, self.head_dim)?
            .iter()
            .map(|a| RopeTable::new(a, len, scale))
            .collect())
    }
}

/// Outputs and attention probabilities, one matrix per head.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub outputs: Vec<Array2<f64>>,
    pub probs: Vec<Array2<f64>>,
}

/// Causal multi-head attention over per-head `[seq, head_dim]` matrices,
/// with positions starting at 0.
pub fn attention_forward(
    q: &[Array2<f64>],
    k: &[Array2<f64>],
    v: &[Array2<f64>],
    config: &AttentionConfig,
) -> Result<AttentionOutput> {
    attention_forward_from(q, k, v, config, 0)
}

/// As [`attention_forward`] with positions starting at `start`.
pub fn attention_forward_from(
    q: &[Array2<f64>],
    k: &[Array2<f64>],
    v: &[Array2<f64>],
    config: &AttentionConfig,
    start: usize,
) -> Result<AttentionOutput> {
    let h = config.n_heads;
    if q.len() != h || k.len() != h || v.len() != h {
        return Err(HarpeError::invalid(format!(
            "expected {h} heads, got q={} k={} v={}",
            q.len(),
            k.len(),
            v.len()
        )));
    }
    let seq = q[0].nrows();
    if seq > config.context_len {
        return Err(HarpeError::ContextExceeded {
            len: seq,
            context: config.context_len,
        });
    }
    for m in q.iter().chain(k).chain(v) {
        if m.nrows() != seq || m.ncols() != config.head_dim {
            return Err(HarpeError::invalid(format!(
                "per-head matrices must be [{seq}, {}], got {:?}",
                config.head_dim,
                m.shape()
            )));
        }
        if m.iter().any(|x| x.is_nan()) {
            return Err(HarpeError::invalid("NaN in attention input"));
        }
    }

    let tables = config.tables::<f64>(start + seq)?;
    let scale = config.logit_scale();
    let mut outputs = Vec::with_capacity(h);
    let mut probs = Vec::with_capacity(h);
    for head in 0..h {
        let mut qr = q[head].clone();
        let mut kr = k[head].clone();
        tables[head].apply(qr.view_mut(), start, false);
        tables[head].apply(kr.view_mut(), start, false);
        let (out, p) = causal_attention(qr.view(), kr.view(), v[head].view(), scale);
        outputs.push(out);
        probs.push(p);
    }
    Ok(AttentionOutput { outputs, probs })
}

/// Single-head causal attention on already-rotated queries and keys.
/// Returns the output rows and the row-stochastic probability matrix
/// (zero above the diagonal).
pub(crate) fn causal_attention<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    scale: f64,
) -> (Array2<T>, Array2<T>) {
    let n = q.nrows();
    let scale = T::from_f64(scale).unwrap();
    let mut p = Array2::<T>::zeros((n, n));
    let mut out = Array2::<T>::zeros((n, v.ncols()));
    // query block [r0, r1) only ever sees keys [0, r1)
    for r0 in (0..n).step_by(BLOCK) {
        let r1 = (r0 + BLOCK).min(n);
        let mut pb = p.slice_mut(s![r0..r1, ..r1]);
        general_mat_mul(scale, &q.slice(s![r0..r1, ..]), &k.slice(s![..r1, ..]).t(), T::zero(), &mut pb);
        for (ii, mut row) in pb.rows_mut().into_iter().enumerate() {
            let visible = r0 + ii + 1;
            let mut max = T::neg_infinity();
            for &x in row.iter().take(visible) {
                max = max.max(x);
            }
            let mut sum = T::zero();
            for x in row.iter_mut().take(visible) {
                *x = (*x - max).exp();
                sum += *x;
            }
            let inv = sum.recip();
            for x in row.iter_mut().take(visible) {
                *x *= inv;
            }
            row.slice_mut(s![visible..]).fill(T::zero());
        }
        general_mat_mul(
            T::one(),
            &pb,
            &v.slice(s![..r1, ..]),
            T::zero(),
            &mut out.slice_mut(s![r0..r1, ..]),
        );
    }
    (out, p)
}

/// Gradients of [`causal_attention`] with respect to rotated `q`, rotated
/// `k` and `v`.
pub(crate) fn causal_attention_backward<T: Real>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    p: ArrayView2<'_, T>,
    d_out: ArrayView2<'_, T>,
    scale: f64,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let n = q.nrows();
    let scale = T::from_f64(scale).unwrap();
    let (one, zero) = (T::one(), T::zero());
    let mut dq = Array2::<T>::zeros(q.raw_dim());
    let mut dk = Array2::<T>::zeros(k.raw_dim());
    let mut dv = Array2::<T>::zeros(v.raw_dim());
    let mut ds_buf = Array2::<T>::zeros((BLOCK.min(n), n));
    for r0 in (0..n).step_by(BLOCK) {
        let r1 = (r0 + BLOCK).min(n);
        let pb = p.slice(s![r0..r1, ..r1]);
        let dob = d_out.slice(s![r0..r1, ..]);
        general_mat_mul(one, &pb.t(), &dob, one, &mut dv.slice_mut(s![..r1, ..]));
        let mut ds = ds_buf.slice_mut(s![..r1 - r0, ..r1]);
        general_mat_mul(one, &dob, &v.slice(s![..r1, ..]).t(), zero, &mut ds);
        Zip::from(ds.rows_mut()).and(pb.rows()).for_each(|mut ds_row, p_row| {
            let dot = ds_row
                .iter()
                .zip(p_row.iter())
                .fold(zero, |acc, (&a, &b)| acc + a * b);
            ds_row.zip_mut_with(&p_row, |d, &pp| *d = pp * (*d - dot) * scale);
        });
        general_mat_mul(one, &ds, &k.slice(s![..r1, ..]), zero, &mut dq.slice_mut(s![r0..r1, ..]));
        general_mat_mul(one, &ds.t(), &q.slice(s![r0..r1, ..]), one, &mut dk.slice_mut(s![..r1, ..]));
    }
    (dq, dk, dv)
}
