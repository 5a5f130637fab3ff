//! Parameterised layers and the per-call forward context.

use rand::Rng;

use super::params::{BufferId, ParamId, ParamStore};
use super::probe::Probe;
use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the default linear/conv init.
fn kaiming_uniform(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Running-statistics update produced by one training-mode normalisation.
#[derive(Clone, Debug)]
pub(crate) struct BnUpdate<T> {
    pub mean: BufferId,
    pub var: BufferId,
    pub momentum: f64,
    pub stats: BatchStats<T>,
}

/// State threaded through one forward pass.
pub struct Forward<'a, T: Scalar> {
    pub(crate) store: &'a ParamStore<T>,
    pub(crate) vars: Vec<Var>,
    pub training: bool,
    pub(crate) bn_updates: Vec<BnUpdate<T>>,
    pub probe: Option<&'a mut Probe<T>>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(store: &'a ParamStore<T>, tape: &mut Tape<T>, training: bool) -> Self {
        Self { store, vars: store.bind(tape), training, bn_updates: Vec::new(), probe: None }
    }

    pub fn with_probe(mut self, probe: &'a mut Probe<T>) -> Self {
        self.probe = Some(probe);
        self
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Routes parameter `id` through `v` instead of its own leaf.
    pub fn set_var(&mut self, id: ParamId, v: Var) {
        self.vars[id.0] = v;
    }

    /// Tape leaves of every parameter, in store order.
    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    pub(crate) fn record_input(&mut self, tape: &Tape<T>, layer: &str, x: Var) {
        if let Some(p) = self.probe.as_deref_mut() {
            p.record_layer_input(layer, tape.value(x));
        }
    }

    /// Applies collected running-statistics updates to `store`.
    pub(crate) fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }
}

pub(crate) fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: Vec<BnUpdate<T>>) {
    for u in updates {
        let m = T::from_f64_lossy(u.momentum);
        for (r, &b) in store.buffer_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in store.buffer_mut(u.var).data_mut().iter_mut().zip(&u.stats.var_unbiased) {
            *r = (T::one() - m) * *r + m * b;
        }
    }
}

fn init<T: Scalar>(shape: &[usize], values: Vec<f64>) -> Tensor<T> {
    Tensor::from_f64(shape, &values).expect("initialiser length matches shape")
}

/// Fully connected map over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let w = init(&[fan_out, fan_in], kaiming_uniform(rng, fan_in * fan_out, fan_in));
        let weight = store.add_param(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add_param(format!("{name}.bias"), init(&[fan_out], kaiming_uniform(rng, fan_out, fan_in))));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ctx: &Forward<'_, T>, x: Var) -> Result<Var> {
        tape.linear(x, ctx.var(self.weight), self.bias.map(|b| ctx.var(b)))
    }
}

/// Same-padded 3x3 (or any odd) stride-1 convolution.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl Conv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let w = init(&[c_out, c_in, kernel, kernel], kaiming_uniform(rng, c_out * fan_in, fan_in));
        let weight = store.add_param(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add_param(format!("{name}.bias"), init(&[c_out], kaiming_uniform(rng, c_out, fan_in))));
        Self { weight, bias, c_in, c_out, kernel }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ctx: &Forward<'_, T>, x: Var) -> Result<Var> {
        tape.conv2d(x, ctx.var(self.weight), self.bias.map(|b| ctx.var(b)))
    }
}

/// Batch normalisation with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add_param(format!("{name}.gamma"), Tensor::full(&[channels], T::one()));
        let beta = store.add_param(format!("{name}.beta"), Tensor::zeros(&[channels]));
        let running_mean = store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]));
        let running_var = store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], T::one()));
        Self { gamma, beta, running_mean, running_var, channels, eps: 1e-5, momentum: 0.1 }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, ctx: &mut Forward<'_, T>, x: Var, channel_axis: usize) -> Result<Var> {
        let (g, b) = (ctx.var(self.gamma), ctx.var(self.beta));
        let eps = T::from_f64_lossy(self.eps);
        if ctx.training {
            let (y, stats) = tape.batch_norm_train(x, channel_axis, g, b, eps)?;
            ctx.bn_updates.push(BnUpdate { mean: self.running_mean, var: self.running_var, momentum: self.momentum, stats });
            Ok(y)
        } else {
            let store = ctx.store;
            tape.batch_norm_eval(
                x,
                channel_axis,
                g,
                b,
                store.buffer(self.running_mean).data(),
                store.buffer(self.running_var).data(),
                eps,
            )
        }
    }

    /// Folding parameters for the energy model and deployment.
    pub fn params<T: Scalar>(&self, store: &ParamStore<T>) -> crate::autodiff::BnParams<T> {
        crate::autodiff::BnParams {
            gamma: store.param(self.gamma).data().to_vec(),
            beta: store.param(self.beta).data().to_vec(),
            mean: store.buffer(self.running_mean).data().to_vec(),
            var: store.buffer(self.running_var).data().to_vec(),
            eps: T::from_f64_lossy(self.eps),
        }
    }
}
