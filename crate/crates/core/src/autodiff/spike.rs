use super::{Backward, GradSink, Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::SurrogateSpec;

struct HeavisideOp<T> {
    x: Var,
    threshold: T,
    spec: SurrogateSpec,
}

impl<T: Scalar> Backward<T> for HeavisideOp<T> {
    fn backward(&self, tape: &Tape<T>, _: Var, grad: &[T], sink: &mut GradSink<'_, T>) {
        let xv = tape.value(self.x);
        if let Some(dx) = sink.slot(self.x) {
            for ((d, &g), &x) in dx.iter_mut().zip(grad).zip(xv) {
                *d += g * self.spec.derivative(x - self.threshold);
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Binary step `x >= threshold`, differentiated through the surrogate.
    pub fn heaviside_surrogate(&mut self, x: Var, threshold: T, spec: SurrogateSpec) -> Result<Var> {
        spec.validate()?;
        let v = self.value(x).iter().map(|&x| if x >= threshold { T::one() } else { T::zero() }).collect();
        Ok(self.push("heaviside", self.shape(x).to_vec(), v, &[x], HeavisideOp { x, threshold, spec }))
    }
}
