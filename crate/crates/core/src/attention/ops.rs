//! Tape operations for the STDP kernel and the signed synaptic update.

use crate::autodiff::{Backward, GradSink, Tape, Var};
use crate::error::{contract, Result};
use crate::scalar::Scalar;

struct KernelOp<T> {
    dt: Var,
    tau: T,
}

impl<T: Scalar> Backward<T> for KernelOp<T> {
    fn backward(&self, tape: &Tape<T>, out: Var, grad: &[T], sink: &mut GradSink<'_, T>) {
        let f = tape.value(out);
        let dt = tape.value(self.dt);
        if let Some(d) = sink.slot(self.dt) {
            for i in 0..d.len() {
                // d|dt|/d(dt) taken as +1 at dt = 0, the causal branch.
                let sign = if dt[i] < T::zero() { -T::one() } else { T::one() };
                d[i] += grad[i] * (-sign * f[i] / self.tau);
            }
        }
    }
}

struct UpdateOp {
    dt: Var,
    f: Var,
}

impl<T: Scalar> Backward<T> for UpdateOp {
    fn backward(&self, tape: &Tape<T>, _: Var, grad: &[T], sink: &mut GradSink<'_, T>) {
        let dt = tape.value(self.dt);
        // The branch sign is a constant: nothing flows into dt from here.
        if let Some(d) = sink.slot(self.f) {
            for i in 0..d.len() {
                d[i] += if dt[i] < T::zero() { grad[i] } else { -grad[i] };
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// `a * exp(-|dt| / tau)` elementwise.
    pub fn stdp_kernel(&mut self, dt: Var, a_stdp: f64, tau_stdp: f64) -> Result<Var> {
        if !(a_stdp > 0.0 && tau_stdp > 0.0) {
            return Err(contract("stdp_kernel needs positive amplitude and time constant"));
        }
        let (a, tau) = (T::from_f64_lossy(a_stdp), T::from_f64_lossy(tau_stdp));
        let v = self.value(dt).iter().map(|&d| a * (-d.abs() / tau).exp()).collect();
        Ok(self.push("stdp_kernel", self.shape(dt).to_vec(), v, &[dt], KernelOp { dt, tau }))
    }

    /// `+f` where `dt < 0`, `-f` where `dt >= 0`.
    pub fn synaptic_update(&mut self, dt: Var, f: Var) -> Result<Var> {
        if self.shape(dt) != self.shape(f) {
            return Err(contract("synaptic_update: dt and kernel shapes differ"));
        }
        let v = self
            .value(dt)
            .iter()
            .zip(self.value(f))
            .map(|(&d, &f)| if d < T::zero() { f } else { -f })
            .collect();
        Ok(self.push("synaptic_update", self.shape(dt).to_vec(), v, &[dt, f], UpdateOp { dt, f }))
    }
}
