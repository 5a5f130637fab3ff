use crate::error::{contract, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Inference-time batch-normalisation parameters of one channel set.
#[derive(Clone, Debug, PartialEq)]
pub struct BnParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub eps: T,
}

/// Merges `BN(conv(x))` into a single convolution with bias.
///
/// Output channel `c` is scaled by `gamma[c] / sqrt(var[c] + eps)`; the bias
/// becomes `(b - mean) * scale + beta`. Works for any weight whose leading
/// axis is the output channel, so linear layers fold the same way.
pub fn fold_bn_into_conv<T: Scalar>(
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    bn: &BnParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let c_out = *weights.shape().first().ok_or_else(|| contract("weights must have an output-channel axis"))?;
    if [&bn.gamma, &bn.beta, &bn.mean, &bn.var].iter().any(|v| v.len() != c_out) {
        return Err(contract(format!("batch norm parameters must have {c_out} channels")));
    }
    if let Some(b) = bias {
        if b.numel() != c_out {
            return Err(contract(format!("bias has {} entries, expected {c_out}", b.numel())));
        }
    }
    if let Some(c) = bn.var.iter().position(|&v| !(v > T::zero())) {
        return Err(contract(format!("batch norm channel {c} has non-positive running variance")));
    }
    let per = weights.numel() / c_out.max(1);
    let scale: Vec<T> = (0..c_out).map(|c| bn.gamma[c] / (bn.var[c] + bn.eps).sqrt()).collect();
    let mut w = weights.clone();
    w.requires_grad = false;
    w.grad = None;
    for (c, chunk) in w.data_mut().chunks_mut(per).enumerate() {
        chunk.iter_mut().for_each(|v| *v *= scale[c]);
    }
    let b: Vec<T> = (0..c_out)
        .map(|c| {
            let b0 = bias.map_or(T::zero(), |b| b.data()[c]);
            (b0 - bn.mean[c]) * scale[c] + bn.beta[c]
        })
        .collect();
    Ok((w, Tensor::new(vec![c_out], b)?))
}
