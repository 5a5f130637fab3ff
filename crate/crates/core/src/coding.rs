//! Spike counts, first-spike latency coding and the two-constant asymmetric
//! exponential STDP similarity between binary vectors.

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::scalar::Scalar;
use crate::tensor::is_binary;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyCoderConfig {
    /// Latency assigned to a silent vector.
    pub t_max: f64,
    /// Vector dimensionality, i.e. the largest possible count.
    pub d: usize,
}

impl LatencyCoderConfig {
    pub fn new(t_max: f64, d: usize) -> Result<Self> {
        if !(t_max > 0.0) || !t_max.is_finite() {
            return Err(config(format!("t_max must be positive, got {t_max}")));
        }
        if d == 0 {
            return Err(config("latency coder dimensionality must be at least 1"));
        }
        Ok(Self { t_max, d })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralStdpConfig {
    pub a_plus: f64,
    pub a_minus: f64,
    pub tau_plus: f64,
    pub tau_minus: f64,
}

impl GeneralStdpConfig {
    pub fn new(a_plus: f64, a_minus: f64, tau_plus: f64, tau_minus: f64) -> Result<Self> {
        let cfg = Self { a_plus, a_minus, tau_plus, tau_minus };
        if [a_plus, a_minus, tau_plus, tau_minus].iter().any(|v| !(*v > 0.0)) {
            return Err(config(format!("STDP amplitudes and time constants must be positive: {cfg:?}")));
        }
        Ok(cfg)
    }
}

/// Number of ones in a binary vector.
pub fn spike_count<T: Scalar>(v: &[T]) -> Result<usize> {
    if !is_binary(v) {
        return Err(contract("spike_count expects a binary vector"));
    }
    Ok(v.iter().filter(|&&x| x == T::one()).count())
}

/// Linear rate-to-latency map `t = t_max * (1 - p / d)`.
pub fn latency_encode<T: Scalar>(p: T, cfg: &LatencyCoderConfig) -> Result<T> {
    let d = T::from_usize_lossy(cfg.d);
    if !(p >= T::zero() && p <= d) {
        return Err(contract(format!("spike count {p} outside [0, {}]", cfg.d)));
    }
    Ok(T::from_f64_lossy(cfg.t_max) * (T::one() - p / d))
}

/// Asymmetric exponential STDP rule applied to the latencies of `q` and `k`.
///
/// With `dt = t_q - t_k`: `a_plus * exp(dt / tau_plus)` when `dt < 0`,
/// otherwise `-a_minus * exp(-dt / tau_minus)`.
pub fn stdp_similarity<T: Scalar>(
    q: &[T],
    k: &[T],
    coder: &LatencyCoderConfig,
    cfg: &GeneralStdpConfig,
) -> Result<T> {
    if q.len() != k.len() {
        return Err(contract(format!("stdp_similarity: lengths {} and {} differ", q.len(), k.len())));
    }
    if q.len() != coder.d {
        return Err(contract(format!("vectors have length {} but the coder expects {}", q.len(), coder.d)));
    }
    let tq = latency_encode(T::from_usize_lossy(spike_count(q)?), coder)?;
    let tk = latency_encode(T::from_usize_lossy(spike_count(k)?), coder)?;
    Ok(stdp_rule(tq - tk, cfg))
}

fn stdp_rule<T: Scalar>(dt: T, cfg: &GeneralStdpConfig) -> T {
    if dt < T::zero() {
        T::from_f64_lossy(cfg.a_plus) * (dt / T::from_f64_lossy(cfg.tau_plus)).exp()
    } else {
        -T::from_f64_lossy(cfg.a_minus) * (-dt / T::from_f64_lossy(cfg.tau_minus)).exp()
    }
}
