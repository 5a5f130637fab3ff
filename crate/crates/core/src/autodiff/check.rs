use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffReport {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub finite_difference: Vec<f64>,
    pub reverse_mode: Vec<f64>,
}

/// Compares the reverse-mode gradient of a scalar function against central
/// differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` coordinate by
/// coordinate.
///
/// `f` builds its graph on a fresh tape from the recorded input and returns a
/// one-element output. The error per coordinate is
/// `|fd - ad| / max(|fd|, |ad|, 1e-8)`; the maximum is reported. A NaN or
/// infinite function value is reported as [`Error::NonFinite`].
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<FiniteDiffReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {eps}")));
    }
    let eval = |data: Vec<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.variable(x.shape(), data)?;
        let out = f(&mut tape, v)?;
        let value = tape.value(out);
        if value.len() != 1 {
            return Err(Error::Contract("finite_diff_check needs a scalar-valued function".into()));
        }
        let y = value[0].to_f64_lossy();
        if !y.is_finite() {
            return Err(Error::NonFinite("finite-difference probe of the checked function".into()));
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let v = tape.variable(x.shape(), x.data().to_vec())?;
    let out = f(&mut tape, v)?;
    if !tape.value(out)[0].is_finite() {
        return Err(Error::NonFinite("checked function at the base point".into()));
    }
    let grads = tape.backward(out)?;
    let ad: Vec<f64> = grads.get_or_zeros(&tape, v).iter().map(|g| g.to_f64_lossy()).collect();

    let step = T::from_f64_lossy(eps);
    let mut fd = Vec::with_capacity(x.numel());
    let mut worst = (0.0f64, 0usize);
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += step;
        let mut minus = x.data().to_vec();
        minus[i] -= step;
        // Divide by the realised step so f32 rounding of x ± eps does not bias the quotient.
        let h = (plus[i] - minus[i]).to_f64_lossy();
        let d = (eval(plus)? - eval(minus)?) / h;
        let denom = d.abs().max(ad[i].abs()).max(1e-8);
        let err = (d - ad[i]).abs() / denom;
        if err > worst.0 {
            worst = (err, i);
        }
        fd.push(d);
    }
    Ok(FiniteDiffReport { max_relative_error: worst.0, worst_index: worst.1, finite_difference: fd, reverse_mode: ad })
}
