//! Rotary position encoding.
//!
//! Query and key vectors of width `d` are treated as `d/2` consecutive
//! 2-D pairs `(x0, x1), (x2, x3), ...`. Pair `i` at position `m` is rotated
//! by `m * theta_i` with `theta_i = base^(-2i/d)` (zero-based `i`), so the
//! inner product of a rotated query and key depends only on their offset.
//!
//! All angle and trigonometric math runs in `f64`. With bases in the
//! millions and distances in the hundreds of thousands, `m * theta_i` spans
//! about eleven decimal orders and single precision corrupts the phase.

use ndarray::{ArrayViewMut2, Axis};

use crate::error::{HarpeError, Result};
use crate::Real;

/// Per-pair rotation frequencies for one base and head width.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationAngles {
    head_dim: usize,
    base: f64,
    angles: Vec<f64>,
}

impl RotationAngles {
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }
}

/// A query or key vector together with the position it sits at.
///
/// Positions are non-negative integers in the model path; the type stores an
/// `f64` so position interpolation and tests can use fractional positions.
#[derive(Debug, Clone, PartialEq)]
pub struct RotaryVector {
    pub values: Vec<f64>,
    pub position: f64,
}

impl RotaryVector {
    pub fn new(values: Vec<f64>, position: f64) -> Self {
        Self { values, position }
    }
}

/// Computes `theta_i = base^(-2(i-1)/d)` for `i = 1..=d/2`.
pub fn compute_theta(base: f64, head_dim: usize) -> Result<RotationAngles> {
    if head_dim == 0 || head_dim % 2 != 0 {
        return Err(HarpeError::invalid(format!(
            "head_dim must be even and positive, got {head_dim}"
        )));
    }
    if !(base > 0.0) || !base.is_finite() {
        return Err(HarpeError::invalid(format!(
            "base must be a positive finite number, got {base}"
        )));
    }
    let d = head_dim as f64;
    let angles = (0..head_dim / 2)
        .map(|i| {
            if i == 0 {
                1.0
            } else {
                base.powf(-2.0 * i as f64 / d)
            }
        })
        .collect();
    Ok(RotationAngles {
        head_dim,
        base,
        angles,
    })
}

/// Applies the block-diagonal rotation `R(m * theta)` to `v`.
pub fn rotate(v: &RotaryVector, angles: &RotationAngles) -> Result<Vec<f64>> {
    if v.values.len() != angles.head_dim {
        return Err(HarpeError::invalid(format!(
            "vector of width {} cannot be rotated with head_dim {}",
            v.values.len(),
            angles.head_dim
        )));
    }
    let mut out = v.values.clone();
    rotate_pairs(&mut out, &angles.angles, v.position);
    Ok(out)
}

/// Rotated inner product `f(q, m)^T f(k, n)`.
pub fn pairwise_logit(q: &RotaryVector, k: &RotaryVector, angles: &RotationAngles) -> Result<f64> {
    if q.values.len() != k.values.len() {
        return Err(HarpeError::invalid(format!(
            "query width {} does not match key width {}",
            q.values.len(),
            k.values.len()
        )));
    }
    let qr = rotate(q, angles)?;
    let kr = rotate(k, angles)?;
    Ok(qr.iter().zip(&kr).map(|(a, b)| a * b).sum())
}

pub(crate) fn rotate_pairs(values: &mut [f64], angles: &[f64], position: f64) {
    for (pair, &theta) in values.chunks_exact_mut(2).zip(angles) {
        let (sin, cos) = (position * theta).sin_cos();
        let (x0, x1) = (pair[0], pair[1]);
        pair[0] = x0 * cos - x1 * sin;
        pair[1] = x0 * sin + x1 * cos;
    }
}

/// Cached `cos`/`sin` of `position * theta_i` for a run of positions.
///
/// Entries are evaluated in `f64` and only then narrowed to `T`.
#[derive(Debug, Clone)]
pub struct RopeTable<T> {
    half: usize,
    len: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Real> RopeTable<T> {
    /// Builds a table for integer positions `0..len`, each divided by
    /// `position_scale` (1 for plain RoPE, the interpolation factor for PI).
    pub fn new(angles: &RotationAngles, len: usize, position_scale: f64) -> Self {
        let half = angles.angles.len();
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for pos in 0..len {
            let m = pos as f64 / position_scale;
            for &theta in &angles.angles {
                let (s, c) = (m * theta).sin_cos();
                cos.push(T::from_f64(c).unwrap());
                sin.push(T::from_f64(s).unwrap());
            }
        }
        Self { half, len, cos, sin }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Rotates each row `r` of `x` (shape `[rows, 2 * half]`) to position
    /// `offset + r`. With `inverse` the transpose rotation is applied, which
    /// is what back-propagation through the rotation needs.
    pub fn apply(&self, mut x: ArrayViewMut2<'_, T>, offset: usize, inverse: bool) {
        debug_assert_eq!(x.ncols(), 2 * self.half);
        debug_assert!(offset + x.nrows() <= self.len);
        for (r, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
            let base = (offset + r) * self.half;
            let cos = &self.cos[base..base + self.half];
            let sin = &self.sin[base..base + self.half];
            for i in 0..self.half {
                let (c, s) = if inverse {
                    (cos[i], -sin[i])
                } else {
                    (cos[i], sin[i])
                };
                let x0 = row[2 * i];
                let x1 = row[2 * i + 1];
                row[2 * i] = x0 * c - x1 * s;
                row[2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
}
