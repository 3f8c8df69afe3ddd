//! Head-adaptive rotary position encoding (HARPE).
//!
//! * [`rope`]: rotary angles, vector rotation and rotated logits.
//! * [`bases`]: uniform and peak/valley-searched per-head base sets.
//! * [`attention`]: positional strategies and causal multi-head attention.
//! * [`model`]: a small pre-norm decoder with hand-written backward passes,
//!   checkpoints and staged continual-pretraining schedules.
//! * [`corpus`]: seeded synthetic corpora over a fixed vocabulary.
//! * [`eval`]: sliding-window perplexity and needle-in-a-haystack tasks.
//! * [`experiment`]: JSON experiment configs tying the above together.

pub mod attention;
pub mod bases;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod rope;
pub mod seed;

pub use error::{HarpeError, Result};

/// Floating-point element type used by the model and attention kernels.
pub trait Real:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::Float
    + num_traits::FromPrimitive
    + std::fmt::Debug
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Default
    + Send
    + Sync
    + 'static
{
}

impl<T> Real for T where
    T: ndarray::LinalgScalar
        + ndarray::ScalarOperand
        + num_traits::Float
        + num_traits::FromPrimitive
        + std::fmt::Debug
        + std::iter::Sum
        + std::ops::AddAssign
        + std::ops::SubAssign
        + std::ops::MulAssign
        + Default
        + Send
        + Sync
        + 'static
{
}
