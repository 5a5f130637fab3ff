//! STDP-timing self-attention.
//!
//! Per head and timestep, query/key spike counts become first-spike
//! latencies; their pairwise differences drive an exponential STDP kernel
//! whose signed, offset-shifted output is the attention score. Scores lie in
//! `[w_offset - a_stdp, w_offset + a_stdp]`, so no softmax is needed and,
//! because V is binary, applying them is a pure accumulation.

mod block;
mod kernels;
mod ops;

pub use block::{s2tdpsa_forward, stdp_scores, AttentionWeights};
pub use kernels::{
    attention_apply, attention_scores, dense_apply, gather_accumulate, head_merge, head_split, stdp_kernel,
    synaptic_update, timing_diff, token_latencies, token_rates,
};

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StdpAttentionConfig {
    pub heads: usize,
    /// Kernel amplitude.
    pub a_stdp: f64,
    /// Kernel time constant.
    pub tau_stdp: f64,
    /// Constant shift moving signed updates into `(0, 1)`.
    pub w_offset: f64,
    /// Latency of a silent token.
    pub t_max: f64,
    /// Output scaling applied after accumulation.
    pub s: f64,
}

impl Default for StdpAttentionConfig {
    fn default() -> Self {
        Self { heads: 1, a_stdp: 0.4, tau_stdp: 0.5, w_offset: 0.5, t_max: 1.0, s: 0.125 }
    }
}

impl StdpAttentionConfig {
    pub fn with_heads(heads: usize) -> Self {
        Self { heads, ..Self::default() }
    }

    /// Rejects configurations whose scores could leave the open unit interval.
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(config("attention needs at least one head"));
        }
        for (name, v) in [("a_stdp", self.a_stdp), ("tau_stdp", self.tau_stdp), ("t_max", self.t_max), ("s", self.s)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(config(format!("attention {name} must be positive, got {v}")));
            }
        }
        if !(self.a_stdp < self.w_offset) {
            return Err(config(format!(
                "a_stdp ({}) must be below w_offset ({}) to keep scores positive",
                self.a_stdp, self.w_offset
            )));
        }
        if !(self.w_offset + self.a_stdp < 1.0) {
            return Err(config(format!(
                "w_offset + a_stdp ({}) must stay below 1",
                self.w_offset + self.a_stdp
            )));
        }
        Ok(())
    }

    pub fn validate_dim(&self, embed_dim: usize) -> Result<()> {
        self.validate()?;
        if !embed_dim.is_multiple_of(self.heads) {
            return Err(config(format!("embed dim {embed_dim} is not divisible by {} heads", self.heads)));
        }
        Ok(())
    }

    /// Closed interval every score is guaranteed to fall in.
    pub fn score_bounds(&self) -> (f64, f64) {
        (self.w_offset - self.a_stdp, self.w_offset + self.a_stdp)
    }
}

/// Attention matrices `[batch, head, n, n]` (any leading axes allowed), each
/// entry inside `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionScores<T> {
    pub values: Tensor<T>,
}

impl<T: Scalar> AttentionScores<T> {
    pub fn tokens(&self) -> usize {
        *self.values.shape().last().unwrap_or(&0)
    }
}
