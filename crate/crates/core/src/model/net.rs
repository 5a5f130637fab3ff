//! Patch splitting, encoder blocks and the classification head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, StageKind};
use super::layers::{apply_bn_updates, BatchNorm, Conv, Forward, Linear};
use super::params::ParamStore;
use super::probe::Probe;
use crate::attention::{s2tdpsa_forward, AttentionWeights};
use crate::autodiff::{Tape, Var};
use crate::error::{contract, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct SpsLayer {
    kind: StageKind,
    conv: Conv,
    bn: BatchNorm,
    name: String,
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    attn: AttentionWeights,
    fc1: Linear,
    fc1_bn: BatchNorm,
    fc2: Linear,
    fc2_bn: BatchNorm,
    name: String,
}

/// Spiking transformer with STDP attention.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    stem: Conv,
    stem_bn: BatchNorm,
    stages: Vec<SpsLayer>,
    blocks: Vec<EncoderBlock>,
    head: Linear,
}

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;

impl<T: Scalar> Model<T> {
    /// Builds and initialises a model; the same seed always yields the same weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stem = Conv::new(&mut store, "sps.stem", config.in_channels, config.stem_channels, 3, false, &mut rng);
        let stem_bn = BatchNorm::new(&mut store, "sps.stem_bn", config.stem_channels);
        let mut c_in = config.stem_channels;
        let mut stages = Vec::new();
        for (i, st) in config.sps_stages.iter().enumerate() {
            let name = format!("sps.stage{i}");
            let conv = Conv::new(&mut store, &name, c_in, st.channels, 3, false, &mut rng);
            let bn = BatchNorm::new(&mut store, &format!("{name}_bn"), st.channels);
            stages.push(SpsLayer { kind: st.kind, conv, bn, name });
            c_in = st.channels;
        }
        let d = config.embed_dim;
        let hidden = config.mlp_hidden();
        let mut blocks = Vec::new();
        for l in 0..config.depth {
            let name = format!("block{l}");
            let attn = AttentionWeights::new(&mut store, &format!("{name}.attn"), d, &mut rng);
            let fc1 = Linear::new(&mut store, &format!("{name}.mlp.fc1"), d, hidden, true, &mut rng);
            let fc1_bn = BatchNorm::new(&mut store, &format!("{name}.mlp.fc1_bn"), hidden);
            let fc2 = Linear::new(&mut store, &format!("{name}.mlp.fc2"), hidden, d, true, &mut rng);
            let fc2_bn = BatchNorm::new(&mut store, &format!("{name}.mlp.fc2_bn"), d);
            blocks.push(EncoderBlock { attn, fc1, fc1_bn, fc2, fc2_bn, name });
        }
        let head = Linear::new(&mut store, "head", d, config.num_classes, true, &mut rng);
        Ok(Self { config, store, stem, stem_bn, stages, blocks, head })
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Static image `[b, c, h, w]` to token membrane input `[t, b, n, d]`.
    pub fn tokenize(&self, tape: &mut Tape<T>, ctx: &mut Forward<'_, T>, images: Var) -> Result<Var> {
        let cfg = &self.config;
        let shape = tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1..] != [cfg.in_channels, cfg.height, cfg.width] {
            return Err(contract(format!(
                "images must be [b, {}, {}, {}], got {shape:?}",
                cfg.in_channels, cfg.height, cfg.width
            )));
        }
        let batch = shape[0];
        let steps = cfg.timesteps;
        ctx.record_input(tape, "sps.stem", images);
        // The encoding layer sees the same analog frame at every step, so it
        // runs once and is broadcast over time.
        let z = self.stem.forward(tape, ctx, images)?;
        let z = self.stem_bn.forward(tape, ctx, z, 1)?;
        let mut z = tape.repeat_leading(z, steps)?;
        let (mut c, mut h, mut w) = (cfg.stem_channels, cfg.height, cfg.width);
        for st in &self.stages {
            let s = tape.lif(z, &cfg.lif)?;
            let mut s = tape.reshape(s, &[steps * batch, c, h, w])?;
            if st.kind == StageKind::Sped {
                s = tape.max_pool2d(s)?;
                h /= 2;
                w /= 2;
            }
            ctx.record_input(tape, &st.name, s);
            let y = st.conv.forward(tape, ctx, s)?;
            let y = st.bn.forward(tape, ctx, y, 1)?;
            c = st.conv.c_out;
            z = tape.reshape(y, &[steps, batch, c, h, w])?;
        }
        let z = tape.reshape(z, &[steps, batch, c, h * w])?;
        tape.permute(z, &[0, 1, 3, 2])
    }

    fn encoder_block(&self, tape: &mut Tape<T>, ctx: &mut Forward<'_, T>, u: Var, block: &EncoderBlock) -> Result<Var> {
        let cfg = &self.config;
        let shape = tape.shape(u).to_vec();
        let rows = shape[0] * shape[1] * shape[2];
        let spikes = tape.lif(u, &cfg.lif)?;
        record_spikes(tape, ctx, spikes);
        let attn = s2tdpsa_forward(tape, ctx, spikes, &block.attn, &cfg.attention, &cfg.lif)?;
        let u = tape.add(u, attn)?;

        let m = tape.lif(u, &cfg.lif)?;
        record_spikes(tape, ctx, m);
        ctx.record_input(tape, &format!("{}.mlp.fc1", block.name), m);
        let hdn = block.fc1.forward(tape, ctx, m)?;
        let hdn = tape.reshape(hdn, &[rows, block.fc1.fan_out])?;
        let hdn = block.fc1_bn.forward(tape, ctx, hdn, 1)?;
        let hdn = tape.reshape(hdn, &[shape[0], shape[1], shape[2], block.fc1.fan_out])?;
        let hs = tape.lif(hdn, &cfg.lif)?;
        record_spikes(tape, ctx, hs);
        ctx.record_input(tape, &format!("{}.mlp.fc2", block.name), hs);
        let out = block.fc2.forward(tape, ctx, hs)?;
        let out = tape.reshape(out, &[rows, block.fc2.fan_out])?;
        let out = block.fc2_bn.forward(tape, ctx, out, 1)?;
        let out = tape.reshape(out, &shape)?;
        tape.add(u, out)
    }

    /// Final encoder membrane `[t, b, n, d]`.
    pub fn encode(&self, tape: &mut Tape<T>, ctx: &mut Forward<'_, T>, images: Var) -> Result<Var> {
        let mut u = self.tokenize(tape, ctx, images)?;
        for block in &self.blocks {
            u = self.encoder_block(tape, ctx, u, block)?;
        }
        Ok(u)
    }

    /// Logits `[b, classes]`: encoder, mean over time, mean over tokens, linear head.
    pub fn forward(&self, tape: &mut Tape<T>, ctx: &mut Forward<'_, T>, images: Var) -> Result<Var> {
        let u = self.encode(tape, ctx, images)?;
        let pooled = tape.mean_axis(u, 0)?;
        let pooled = tape.mean_axis(pooled, 1)?;
        self.head.forward(tape, ctx, pooled)
    }

    /// Inference-mode logits for a batch `[b, c, h, w]`.
    pub fn predict(&self, images: &Tensor<T>, probe: Option<&mut Probe<T>>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut ctx = Forward::new(&self.store, &mut tape, false);
        if let Some(p) = probe {
            ctx = ctx.with_probe(p);
        }
        let x = tape.constant(images.shape(), images.data().to_vec())?;
        let logits = self.forward(&mut tape, &mut ctx, x)?;
        Ok(tape.tensor(logits))
    }

    pub(crate) fn commit_bn_updates(&mut self, updates: Vec<super::layers::BnUpdate<T>>) {
        apply_bn_updates(&mut self.store, updates);
    }
}

fn record_spikes<T: Scalar>(tape: &Tape<T>, ctx: &mut Forward<'_, T>, s: Var) {
    if let Some(p) = ctx.probe.as_deref_mut() {
        p.record_block_spikes(tape.shape(s), tape.value(s));
    }
}

/// Mean over the leading time axis: `[t, ..] -> [..]`.
pub fn gtmp<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    mean_axis(x, 0)
}

/// Mean over tokens: `[b, n, d] -> [b, d]`.
pub fn gap<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().len() != 3 {
        return Err(contract(format!("gap expects [b, n, d], got {:?}", x.shape())));
    }
    mean_axis(x, 1)
}

fn mean_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() || shape[axis] == 0 {
        return Err(contract(format!("cannot average axis {axis} of {shape:?}")));
    }
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for k in 0..n {
            let src = &x.data()[(o * n + k) * inner..][..inner];
            for (acc, &v) in out[o * inner..][..inner].iter_mut().zip(src) {
                *acc += v;
            }
        }
    }
    let scale = T::one() / T::from_usize_lossy(n);
    out.iter_mut().for_each(|v| *v *= scale);
    let mut new_shape = shape.to_vec();
    new_shape.remove(axis);
    Tensor::new(new_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::SpsStage;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig::toy();
        c.height = 8;
        c.width = 8;
        c.embed_dim = 16;
        c.stem_channels = 4;
        c.sps_stages = vec![SpsStage::spe(8), SpsStage::sped(16)];
        c.depth = 1;
        c.timesteps = 2;
        c
    }

    fn images(c: &ModelConfig, b: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * c.in_channels * c.height * c.width;
        Tensor::new(vec![b, c.in_channels, c.height, c.width], (0..n).map(|_| rng.gen_range(0.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn cifar_4_384_has_expected_parameter_count() {
        let m = Model32::new(ModelConfig::cifar(4, 384, 10), 0).unwrap();
        let p = m.param_count() as f64 / 1e6;
        assert!((p - 9.32).abs() < 0.01, "{p}M parameters");
    }

    #[test]
    fn logits_shape_and_determinism() {
        let c = tiny();
        let x = images(&c, 3, 1);
        let a = Model64::new(c.clone(), 7).unwrap().predict(&x, None).unwrap();
        let b = Model64::new(c, 7).unwrap().predict(&x, None).unwrap();
        assert_eq!(a.shape(), &[3, 4]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn every_spiking_output_and_counted_input_is_binary() {
        let c = tiny();
        let m = Model64::new(c.clone(), 3).unwrap();
        let x = images(&c, 2, 5);
        let mut probe = Probe::new();
        let mut tape = Tape::new();
        let mut ctx = Forward::new(&m.store, &mut tape, true).with_probe(&mut probe);
        let xv = tape.constant(x.shape(), x.data().to_vec()).unwrap();
        m.forward(&mut tape, &mut ctx, xv).unwrap();
        drop(ctx);
        let mut sn = 0;
        for v in tape.vars() {
            if tape.label(v) == "lif" {
                sn += 1;
                assert!(tape.value(v).iter().all(|&s| s == 0.0 || s == 1.0));
            }
        }
        // Two stage inputs, four block neurons, q/k/v, attention and the MLP hidden.
        assert_eq!(sn, 2 + 2 + 3 + 1 + 1);
        for layer in probe.layers().iter().filter(|l| l.name != "sps.stem") {
            assert_eq!(layer.non_binary, 0, "{}", layer.name);
        }
        assert!(probe.layer("sps.stem").unwrap().non_binary > 0);
    }

    #[test]
    fn pooling_order_commutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::new(vec![3, 2, 5, 4], (0..120).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap();
        let a = gap(&gtmp(&x).unwrap()).unwrap();
        // Token mean first: move tokens to the front, average, then time.
        let mut swapped = vec![0.0; 120];
        for t in 0..3 {
            for b in 0..2 {
                for n in 0..5 {
                    for d in 0..4 {
                        swapped[((n * 3 + t) * 2 + b) * 4 + d] = x.data()[((t * 2 + b) * 5 + n) * 4 + d];
                    }
                }
            }
        }
        let sw = Tensor::new(vec![5, 3, 2, 4], swapped).unwrap();
        let b = gtmp(&gtmp(&sw).unwrap()).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_reach_every_parameter_group() {
        let c = tiny();
        let m = Model64::new(c.clone(), 11).unwrap();
        let x = images(&c, 4, 9);
        let mut tape = Tape::new();
        let mut ctx = Forward::new(&m.store, &mut tape, true);
        let xv = tape.constant(x.shape(), x.data().to_vec()).unwrap();
        let logits = m.forward(&mut tape, &mut ctx, xv).unwrap();
        let loss = tape.cross_entropy(logits, &[0, 1, 2, 3]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let vars = ctx.param_vars().to_vec();
        let mut total = 0.0;
        for ((name, _), v) in m.store.params().zip(vars) {
            let g = grads.get_or_zeros(&tape, v);
            assert!(g.iter().all(|x| x.is_finite()), "{name}");
            total += g.iter().map(|x| x.abs()).sum::<f64>();
        }
        assert!(total > 0.0);
        let head: f64 = grads.get_or_zeros(&tape, ctx.var(m.head.weight)).iter().map(|x| x.abs()).sum();
        let stem: f64 = grads.get_or_zeros(&tape, ctx.var(m.stem.weight)).iter().map(|x| x.abs()).sum();
        assert!(head > 0.0 && stem > 0.0);
    }

    #[test]
    fn rejects_wrong_image_shape() {
        let c = tiny();
        let m = Model64::new(c, 0).unwrap();
        let x = Tensor::<f64>::zeros(&[1, 3, 9, 8]);
        assert!(m.predict(&x, None).is_err());
    }
}
