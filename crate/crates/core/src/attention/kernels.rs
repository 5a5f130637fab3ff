//! Forward-only attention primitives on plain tensors.

use num_traits::Num;

use super::{AttentionScores, StdpAttentionConfig};
use crate::autodiff::numel;
use crate::error::{contract, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `[.., n, d] -> [.., heads, n, d / heads]`.
pub fn head_split<T: Scalar>(x: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 2 || heads == 0 || !s[s.len() - 1].is_multiple_of(heads) {
        return Err(contract(format!("cannot split {s:?} into {heads} heads")));
    }
    let (n, d) = (s[s.len() - 2], s[s.len() - 1]);
    let dh = d / heads;
    let outer = numel(&s[..s.len() - 2]);
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for o in 0..outer {
        for h in 0..heads {
            for i in 0..n {
                out.extend_from_slice(&src[(o * n + i) * d + h * dh..][..dh]);
            }
        }
    }
    let mut shape = s[..s.len() - 2].to_vec();
    shape.extend_from_slice(&[heads, n, dh]);
    Tensor::new(shape, out)
}

/// Inverse of [`head_split`]: `[.., heads, n, dh] -> [.., n, heads * dh]`.
pub fn head_merge<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() < 3 {
        return Err(contract(format!("head_merge needs [.., heads, n, dh], got {s:?}")));
    }
    let r = s.len();
    let (heads, n, dh) = (s[r - 3], s[r - 2], s[r - 1]);
    let outer = numel(&s[..r - 3]);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for h in 0..heads {
            for i in 0..n {
                out[(o * n + i) * heads * dh + h * dh..][..dh]
                    .copy_from_slice(&src[((o * heads + h) * n + i) * dh..][..dh]);
            }
        }
    }
    let mut shape = s[..r - 3].to_vec();
    shape.extend_from_slice(&[n, heads * dh]);
    Tensor::new(shape, out)
}

fn rates_of<T: Scalar>(spikes: &Tensor<T>) -> Result<Tensor<T>> {
    if !spikes.is_binary() {
        return Err(contract("token_rates expects binary spikes"));
    }
    let s = spikes.shape();
    let Some(&dh) = s.last() else { return Err(contract("token_rates needs a feature axis")) };
    let data = if dh == 0 {
        vec![T::zero(); numel(&s[..s.len() - 1])]
    } else {
        spikes.data().chunks(dh).map(|c| c.iter().copied().sum()).collect()
    };
    Tensor::new(s[..s.len() - 1].to_vec(), data)
}

/// Per-token spike counts summed over the head feature axis. Values are
/// integers in `[0, dh]` stored in the scalar type.
pub fn token_rates<T: Scalar>(q_s: &Tensor<T>, k_s: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((rates_of(q_s)?, rates_of(k_s)?))
}

/// `t = t_max * (1 - r / d_h)` elementwise.
pub fn token_latencies<T: Scalar>(r: &Tensor<T>, d_h: usize, t_max: f64) -> Result<Tensor<T>> {
    let d = T::from_usize_lossy(d_h);
    if d_h == 0 || r.data().iter().any(|&v| !(v >= T::zero() && v <= d)) {
        return Err(contract(format!("token rate outside [0, {d_h}]")));
    }
    let tm = T::from_f64_lossy(t_max);
    Ok(r.map(|v| tm * (T::one() - v / d)))
}

/// `dt[.., i, j] = t_q[.., i] - t_k[.., j]`.
pub fn timing_diff<T: Scalar>(t_q: &Tensor<T>, t_k: &Tensor<T>) -> Result<Tensor<T>> {
    let (qs, ks) = (t_q.shape(), t_k.shape());
    if qs.is_empty() || qs.len() != ks.len() || qs[..qs.len() - 1] != ks[..ks.len() - 1] {
        return Err(contract(format!("timing_diff: shapes {qs:?} and {ks:?} differ")));
    }
    let (nq, nk) = (qs[qs.len() - 1], ks[ks.len() - 1]);
    let groups = numel(&qs[..qs.len() - 1]);
    let mut out = Vec::with_capacity(groups * nq * nk);
    for g in 0..groups {
        for i in 0..nq {
            let ti = t_q.data()[g * nq + i];
            out.extend(t_k.data()[g * nk..][..nk].iter().map(|&tj| ti - tj));
        }
    }
    let mut shape = qs.to_vec();
    shape.push(nk);
    Tensor::new(shape, out)
}

/// `f = a_stdp * exp(-|dt| / tau_stdp)`.
pub fn stdp_kernel<T: Scalar>(dt: &Tensor<T>, a_stdp: f64, tau_stdp: f64) -> Result<Tensor<T>> {
    if !(a_stdp > 0.0 && tau_stdp > 0.0) {
        return Err(contract("stdp_kernel needs positive amplitude and time constant"));
    }
    let (a, tau) = (T::from_f64_lossy(a_stdp), T::from_f64_lossy(tau_stdp));
    Ok(dt.map(|d| a * (-d.abs() / tau).exp()))
}

/// Signed update: `+f` where `dt < 0`, `-f` where `dt >= 0`.
pub fn synaptic_update<T: Scalar>(dt: &Tensor<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
    if dt.shape() != f.shape() {
        return Err(contract("synaptic_update: dt and kernel shapes differ"));
    }
    let data = dt.data().iter().zip(f.data()).map(|(&d, &f)| if d < T::zero() { f } else { -f }).collect();
    Tensor::new(dt.shape().to_vec(), data)
}

/// Shifts signed updates by `w_offset`. The bound comes from the validated
/// configuration, so this never fails for a valid config.
pub fn attention_scores<T: Scalar>(dw: &Tensor<T>, cfg: &StdpAttentionConfig) -> Result<AttentionScores<T>> {
    cfg.validate()?;
    let off = T::from_f64_lossy(cfg.w_offset);
    Ok(AttentionScores { values: dw.map(|w| w + off) })
}

/// `out = (A . V) * s` over matching leading axes; `A` is `[.., n, n]`,
/// `V` binary `[.., n, dh]`.
pub fn attention_apply<T: Scalar>(a: &AttentionScores<T>, v_s: &Tensor<T>, s: f64) -> Result<Tensor<T>> {
    let (as_, vs) = (a.values.shape(), v_s.shape());
    if as_.len() < 2 || as_.len() != vs.len() || as_[..as_.len() - 1] != vs[..vs.len() - 1] {
        return Err(contract(format!("attention_apply: scores {as_:?} vs values {vs:?}")));
    }
    if !v_s.is_binary() {
        return Err(contract("attention_apply expects binary values"));
    }
    let n = as_[as_.len() - 1];
    let dh = vs[vs.len() - 1];
    let groups = numel(&as_[..as_.len() - 2]);
    let scale = T::from_f64_lossy(s);
    let mut out = Vec::with_capacity(groups * n * dh);
    for g in 0..groups {
        let prod = dense_apply(&a.values.data()[g * n * n..][..n * n], &v_s.data()[g * n * dh..][..n * dh], n, dh);
        out.extend(prod.into_iter().map(|v| v * scale));
    }
    Tensor::new(vs.to_vec(), out)
}

/// Dense `[n, n] x [n, dh]` product in any numeric type.
pub fn dense_apply<N: Num + Copy>(a: &[N], v: &[N], n: usize, dh: usize) -> Vec<N> {
    let mut out = vec![N::zero(); n * dh];
    for i in 0..n {
        for j in 0..n {
            let aij = a[i * n + j];
            for d in 0..dh {
                out[i * dh + d] = out[i * dh + d] + aij * v[j * dh + d];
            }
        }
    }
    out
}

/// Addition-only form of [`dense_apply`] for binary `V`:
/// `out[i, d]` is the sum of `A[i, j]` over the `j` with `V[j, d] = 1`.
pub fn gather_accumulate<N: Num + Copy>(a: &[N], v: &[bool], n: usize, dh: usize) -> Vec<N> {
    let mut out = vec![N::zero(); n * dh];
    for i in 0..n {
        for d in 0..dh {
            let mut acc = N::zero();
            for j in 0..n {
                if v[j * dh + d] {
                    acc = acc + a[i * n + j];
                }
            }
            out[i * dh + d] = acc;
        }
    }
    out
}
