//! Constrained reinforcement learning for video rate control on a synthetic
//! encoder: environment, self-competition reward, a MuZero-style agent,
//! reference policies and BD-rate evaluation.

// Range checks are written as `!(x > lo)` so that NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod baselines;
pub mod codec_sim;
pub mod error;
pub mod eval;
pub mod reward;

pub use error::{Error, Result};
