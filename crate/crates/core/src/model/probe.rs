//! Optional instrumentation filled in during a forward pass.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spike statistics of the input consumed by one counted layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerActivity {
    pub name: String,
    pub ones: f64,
    pub total: u64,
    /// Entries that were neither 0 nor 1.
    pub non_binary: u64,
}

impl LayerActivity {
    pub fn firing_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.ones / self.total as f64
        }
    }
}

/// Records layer-input firing, per-token encoder spiking and attention maps.
#[derive(Clone, Debug, Default)]
pub struct Probe<T> {
    layers: Vec<LayerActivity>,
    /// `[batch * tokens]` sums of encoder-block spikes, with matching counts.
    token_sums: Vec<f64>,
    token_counts: Vec<f64>,
    capture_attention: bool,
    attention: Vec<Tensor<T>>,
}

impl<T: Scalar> Probe<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new(), token_sums: Vec::new(), token_counts: Vec::new(), capture_attention: false, attention: Vec::new() }
    }

    /// Also keeps every attention-score tensor (`[t, b, h, n, n]` per block).
    pub fn capturing_attention() -> Self {
        Self { capture_attention: true, ..Self::new() }
    }

    pub(crate) fn record_layer_input(&mut self, name: &str, values: &[T]) {
        let ones = values.iter().filter(|&&v| v == T::one()).count() as f64;
        let non_binary = values.iter().filter(|&&v| v != T::one() && v != T::zero()).count() as u64;
        match self.layers.iter_mut().find(|l| l.name == name) {
            Some(l) => {
                l.ones += ones;
                l.total += values.len() as u64;
                l.non_binary += non_binary;
            }
            None => self.layers.push(LayerActivity { name: name.to_string(), ones, total: values.len() as u64, non_binary }),
        }
    }

    /// Adds an encoder spike tensor laid out `[t, b, n, f]`.
    pub(crate) fn record_block_spikes(&mut self, shape: &[usize], values: &[T]) {
        let (steps, batch, tokens, feats) = (shape[0], shape[1], shape[2], shape[3]);
        if self.token_sums.len() != batch * tokens {
            self.token_sums = vec![0.0; batch * tokens];
            self.token_counts = vec![0.0; batch * tokens];
        }
        for t in 0..steps {
            for bn in 0..batch * tokens {
                let row = &values[(t * batch * tokens + bn) * feats..][..feats];
                self.token_sums[bn] += row.iter().map(|v| v.to_f64_lossy()).sum::<f64>();
                self.token_counts[bn] += feats as f64;
            }
        }
    }

    pub(crate) fn wants_attention(&self) -> bool {
        self.capture_attention
    }

    pub(crate) fn record_attention(&mut self, scores: Tensor<T>) {
        self.attention.push(scores);
    }

    pub fn layers(&self) -> &[LayerActivity] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerActivity> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Mean encoder spike probability per `(sample, token)`, `[batch * tokens]`.
    pub fn token_rates(&self) -> Vec<f64> {
        self.token_sums
            .iter()
            .zip(&self.token_counts)
            .map(|(&s, &c)| if c > 0.0 { s / c } else { 0.0 })
            .collect()
    }

    pub fn attention(&self) -> &[Tensor<T>] {
        &self.attention
    }
}
