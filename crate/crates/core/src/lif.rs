//! Multi-step leaky integrate-and-fire neuron (the `SN` operator).
//!
//! ```text
//! U[t] = H[t-1] + X[t]
//! S[t] = U[t] >= v_th
//! H[t] = v_reset * S[t] + beta * U[t] * (1 - S[t])
//! ```
//!
//! History starts at zero for every sequence.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Backward, GradSink, Tape, Var};
use crate::error::{config, contract, Result};
use crate::scalar::Scalar;
use crate::tensor::{SurrogateSpec, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LifConfig {
    pub v_th: f64,
    pub v_reset: f64,
    /// Membrane decay applied to non-firing neurons.
    pub beta: f64,
    pub surrogate: SurrogateSpec,
}

impl Default for LifConfig {
    fn default() -> Self {
        Self { v_th: 1.0, v_reset: 0.0, beta: 0.5, surrogate: SurrogateSpec::default() }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(config(format!("lif beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.v_reset < self.v_th) {
            return Err(config(format!("lif v_reset ({}) must be below v_th ({})", self.v_reset, self.v_th)));
        }
        self.surrogate.validate()
    }

    #[inline]
    fn next_history<T: Scalar>(&self, u: T, spike: bool) -> T {
        if spike {
            T::from_f64_lossy(self.v_reset)
        } else {
            T::from_f64_lossy(self.beta) * u
        }
    }
}

/// Temporal history `H[t]` of a neuron population.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState<T> {
    pub h: Tensor<T>,
}

impl<T: Scalar> LifState<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { h: Tensor::zeros(shape) }
    }
}

/// Advances every neuron by one timestep.
pub fn lif_step<T: Scalar>(state: &LifState<T>, x: &Tensor<T>, cfg: &LifConfig) -> Result<(Tensor<T>, LifState<T>)> {
    if state.h.shape() != x.shape() {
        return Err(contract(format!("lif_step: history {:?} vs input {:?}", state.h.shape(), x.shape())));
    }
    let th = T::from_f64_lossy(cfg.v_th);
    let mut spikes = Vec::with_capacity(x.numel());
    let mut h = Vec::with_capacity(x.numel());
    for (&h0, &xi) in state.h.data().iter().zip(x.data()) {
        let u = h0 + xi;
        let s = u >= th;
        spikes.push(if s { T::one() } else { T::zero() });
        h.push(cfg.next_history(u, s));
    }
    Ok((Tensor::new(x.shape().to_vec(), spikes)?, LifState { h: Tensor::new(x.shape().to_vec(), h)? }))
}

/// Runs [`lif_step`] over the leading time axis of `inputs`.
pub fn lif_sequence<T: Scalar>(inputs: &Tensor<T>, cfg: &LifConfig, initial: Option<&LifState<T>>) -> Result<Tensor<T>> {
    let (steps, per) = time_layout(inputs.shape())?;
    let step_shape = &inputs.shape()[1..];
    let mut state = match initial {
        Some(s) => s.clone(),
        None => LifState::zeros(step_shape),
    };
    let mut out = Vec::with_capacity(inputs.numel());
    for t in 0..steps {
        let x = Tensor::new(step_shape.to_vec(), inputs.data()[t * per..][..per].to_vec())?;
        let (s, next) = lif_step(&state, &x, cfg)?;
        out.extend_from_slice(s.data());
        state = next;
    }
    Tensor::new(inputs.shape().to_vec(), out)
}

fn time_layout(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.first() {
        Some(&t) if t >= 1 => Ok((t, shape[1..].iter().product())),
        _ => Err(contract(format!("lif input needs a non-empty leading time axis, got {shape:?}"))),
    }
}

struct LifOp<T> {
    x: Var,
    cfg: LifConfig,
    steps: usize,
    per: usize,
    /// Pre-reset membrane potential at every step.
    membrane: Vec<T>,
}

impl<T: Scalar> Backward<T> for LifOp<T> {
    fn backward(&self, tape: &Tape<T>, out: Var, grad: &[T], sink: &mut GradSink<'_, T>) {
        let Some(dx) = sink.slot(self.x) else { return };
        let spikes = tape.value(out);
        let th = T::from_f64_lossy(self.cfg.v_th);
        let reset = T::from_f64_lossy(self.cfg.v_reset);
        let beta = T::from_f64_lossy(self.cfg.beta);
        let mut dh = vec![T::zero(); self.per];
        for t in (0..self.steps).rev() {
            let base = t * self.per;
            for j in 0..self.per {
                let u = self.membrane[base + j];
                let s = spikes[base + j];
                let sg = self.cfg.surrogate.derivative(u - th);
                // dS/dU through the surrogate, dH/dU through both reset branches.
                let dh_du = beta * (T::one() - s) + (reset - beta * u) * sg;
                let du = grad[base + j] * sg + dh[j] * dh_du;
                dx[base + j] += du;
                dh[j] = du;
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Multi-step LIF over the leading time axis of `x`, from zero history.
    pub fn lif(&mut self, x: Var, cfg: &LifConfig) -> Result<Var> {
        cfg.validate()?;
        let shape = self.shape(x).to_vec();
        let (steps, per) = time_layout(&shape)?;
        let th = T::from_f64_lossy(cfg.v_th);
        let xv = self.value(x);
        let mut spikes = Vec::with_capacity(xv.len());
        let mut membrane = Vec::with_capacity(xv.len());
        let mut h = vec![T::zero(); per];
        for t in 0..steps {
            for (j, h) in h.iter_mut().enumerate() {
                let u = *h + xv[t * per + j];
                let s = u >= th;
                membrane.push(u);
                spikes.push(if s { T::one() } else { T::zero() });
                *h = cfg.next_history(u, s);
            }
        }
        Ok(self.push("lif", shape, spikes, &[x], LifOp { x, cfg: *cfg, steps, per, membrane }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use proptest::prelude::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_f64(&[1], &[v]).unwrap()
    }

    #[test]
    fn step_examples() {
        let cfg = LifConfig::default();
        let (s, st) = lif_step(&LifState { h: scalar(0.0) }, &scalar(0.6), &cfg).unwrap();
        assert_eq!(s.data(), &[0.0]);
        assert!((st.h.data()[0] - 0.3).abs() < 1e-15);
        let (s, st) = lif_step(&st, &scalar(0.8), &cfg).unwrap();
        assert_eq!(s.data(), &[1.0]);
        assert_eq!(st.h.data(), &[0.0]);
    }

    #[test]
    fn silent_without_input() {
        let x = Tensor::<f64>::zeros(&[10, 3]);
        let s = lif_sequence(&x, &LifConfig::default(), None).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perfect_integrator_accumulates() {
        let cfg = LifConfig { beta: 1.0, ..LifConfig::default() };
        let x = Tensor::<f64>::from_f64(&[3, 1], &[0.4, 0.4, 0.4]).unwrap();
        assert_eq!(lif_sequence(&x, &cfg, None).unwrap().data(), &[0.0, 0.0, 1.0]);
        let x = Tensor::<f64>::from_f64(&[2, 1], &[2.0, 2.0]).unwrap();
        assert_eq!(lif_sequence(&x, &cfg, None).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn single_step_sequence_is_lif_step() {
        let cfg = LifConfig::default();
        let x = Tensor::<f64>::from_f64(&[1, 4], &[0.2, 1.0, 3.0, -1.0]).unwrap();
        let seq = lif_sequence(&x, &cfg, None).unwrap();
        let (s, _) = lif_step(&LifState::zeros(&[4]), &x.clone().reshape(&[4]).unwrap(), &cfg).unwrap();
        assert_eq!(seq.data(), s.data());
    }

    #[test]
    fn errors() {
        let cfg = LifConfig::default();
        assert!(lif_step(&LifState::<f64>::zeros(&[2]), &scalar(0.0), &cfg).is_err());
        assert!(lif_sequence(&Tensor::<f64>::zeros(&[0, 2]), &cfg, None).is_err());
        assert!(LifConfig { beta: 1.5, ..cfg }.validate().is_err());
        assert!(LifConfig { v_reset: 1.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn tape_lif_matches_sequence() {
        let cfg = LifConfig::default();
        let x = Tensor::<f64>::from_f64(&[4, 3], &[0.3, 1.2, -0.4, 0.9, 0.1, 0.8, 0.5, 0.6, 2.0, 0.2, 0.0, 0.7]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let s = tape.lif(xv, &cfg).unwrap();
        assert_eq!(tape.value(s), lif_sequence(&x, &cfg, None).unwrap().data());
    }

    #[test]
    fn surrogate_gradient_is_silent_far_from_threshold() {
        // Every membrane value stays more than 0.5 away from v_th = 1.
        let x = Tensor::<f64>::from_f64(&[3, 2], &[0.1, 2.0, 0.2, 3.0, 0.1, 1.6]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x.clone().with_grad());
        let s = tape.lif(xv, &LifConfig::default()).unwrap();
        let total = tape.sum(s);
        let g = tape.backward(total).unwrap();
        assert!(g.get(xv).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn surrogate_gradient_inside_window_single_step() {
        // One step from zero history: dS/dX = 1 / (2 * 0.5) inside the window.
        let x = Tensor::<f64>::from_f64(&[1, 3], &[0.8, 1.2, 0.4]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x.clone().with_grad());
        let s = tape.lif(xv, &LifConfig::default()).unwrap();
        let total = tape.sum(s);
        let g = tape.backward(total).unwrap();
        assert_eq!(g.get(xv).unwrap(), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn smooth_downstream_gradient_through_subthreshold_lif_inputs() {
        // Far from threshold the LIF contributes zero gradient, so only the
        // direct path of x into the loss remains.
        let x = Tensor::<f64>::from_f64(&[2, 2], &[0.1, 3.0, 0.05, 2.5]).unwrap();
        let r = finite_diff_check(
            |t, x| {
                let s = t.lif(x, &LifConfig::default())?;
                let sum = t.add(s, x)?;
                let sq = t.mul(sum, sum)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-6, "{r:?}");
    }

    proptest! {
        #[test]
        fn binary_and_reset_invariants(
            xs in proptest::collection::vec(-2.0f64..3.0, 8 * 3),
            beta in 0.0f64..=1.0,
        ) {
            let cfg = LifConfig { beta, ..LifConfig::default() };
            let mut h = [0.0; 3];
            let x = Tensor::<f64>::from_f64(&[8, 3], &xs).unwrap();
            let s = lif_sequence(&x, &cfg, None).unwrap();
            for t in 0..8 {
                for j in 0..3 {
                    let u = h[j] + xs[t * 3 + j];
                    let spike = s.data()[t * 3 + j];
                    prop_assert!(spike == 0.0 || spike == 1.0);
                    h[j] = if spike == 1.0 { prop_assert!(u >= 1.0); 0.0 } else { prop_assert!(u < 1.0); beta * u };
                }
            }
        }

        #[test]
        fn exact_accumulation_until_first_spike(c in 0.01f64..0.99) {
            let cfg = LifConfig { beta: 1.0, ..LifConfig::default() };
            let mut state = LifState::zeros(&[1]);
            let x = Tensor::<f64>::from_f64(&[1], &[c]).unwrap();
            let mut acc = 0.0;
            for _ in 0..50 {
                let (s, next) = lif_step(&state, &x, &cfg).unwrap();
                acc += c;
                if s.data()[0] == 1.0 { break; }
                prop_assert_eq!(next.h.data()[0], acc);
                state = next;
            }
        }
    }
}
