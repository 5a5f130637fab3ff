use super::{Backward, GradSink, Tape, Var};
use crate::error::{contract, Result};
use crate::scalar::Scalar;

struct CrossEntropyOp<T> {
    logits: Var,
    /// Softmax minus one-hot, already divided by the batch size.
    dlogits: Vec<T>,
}

impl<T: Scalar> Backward<T> for CrossEntropyOp<T> {
    fn backward(&self, _: &Tape<T>, _: Var, grad: &[T], sink: &mut GradSink<'_, T>) {
        if let Some(d) = sink.slot(self.logits) {
            for (d, &s) in d.iter_mut().zip(&self.dlogits) {
                *d += grad[0] * s;
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Mean negative log-softmax likelihood of `labels` under `[batch, classes]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(contract(format!("cross_entropy: logits {shape:?} vs {} labels", labels.len())));
        }
        let (batch, classes) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(contract(format!("label {bad} out of range for {classes} classes")));
        }
        let lv = self.value(logits);
        let inv_b = T::one() / T::from_usize_lossy(batch);
        let mut loss = T::zero();
        let mut dlogits = vec![T::zero(); lv.len()];
        for (b, &label) in labels.iter().enumerate() {
            let row = &lv[b * classes..][..classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            loss += log_z - row[label];
            for (c, d) in dlogits[b * classes..][..classes].iter_mut().enumerate() {
                let p = (row[c] - log_z).exp();
                *d = (p - if c == label { T::one() } else { T::zero() }) * inv_b;
            }
        }
        Ok(self.push("cross_entropy", vec![1], vec![loss * inv_b], &[logits], CrossEntropyOp { logits, dlogits }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::tensor::Tensor;

    #[test]
    fn uniform_logits_give_ln_k() {
        let mut t = Tape::<f64>::new();
        let l = t.constant(&[2, 10], vec![0.3; 20]).unwrap();
        let loss = t.cross_entropy(l, &[1, 7]).unwrap();
        assert!((t.value(loss)[0] - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dominant_logit_drives_loss_to_zero() {
        let mut t = Tape::<f64>::new();
        let l = t.constant(&[1, 3], vec![500.0, 0.0, 0.0]).unwrap();
        let loss = t.cross_entropy(l, &[0]).unwrap();
        assert!(t.value(loss)[0] < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let mut t = Tape::<f64>::new();
        let l = t.constant(&[1, 3], vec![0.0; 3]).unwrap();
        assert!(t.cross_entropy(l, &[3]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = Tensor::<f64>::from_f64(&[3, 4], &[0.1, -0.5, 2.0, 0.3, 1.2, 0.0, -1.0, 0.4, 0.2, 0.2, 0.9, -2.0]).unwrap();
        let r = finite_diff_check(|t, x| t.cross_entropy(x, &[2, 0, 3]), &x, 1e-5).unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }
}
