use rand::Rng;

use super::StdpAttentionConfig;
use crate::autodiff::{Tape, Var};
use crate::error::{contract, Result};
use crate::lif::LifConfig;
use crate::model::layers::{BatchNorm, Forward, Linear};
use crate::model::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::is_binary;

/// Projection weights of one attention block.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub q: Linear,
    pub q_bn: BatchNorm,
    pub k: Linear,
    pub k_bn: BatchNorm,
    pub v: Linear,
    pub v_bn: BatchNorm,
    pub proj: Linear,
    pub proj_bn: BatchNorm,
    pub name: String,
}

impl AttentionWeights {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let mut branch = |suffix: &str| {
            let lin = Linear::new(store, &format!("{name}.{suffix}"), dim, dim, true, rng);
            let bn = BatchNorm::new(store, &format!("{name}.{suffix}_bn"), dim);
            (lin, bn)
        };
        let (q, q_bn) = branch("q");
        let (k, k_bn) = branch("k");
        let (v, v_bn) = branch("v");
        let (proj, proj_bn) = branch("proj");
        Self { q, q_bn, k, k_bn, v, v_bn, proj, proj_bn, name: name.to_string() }
    }
}

/// `SN(BN(W x))` on `[t, b, n, d]` spikes.
fn spiking_projection<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &mut Forward<'_, T>,
    x: Var,
    lin: &Linear,
    bn: &BatchNorm,
    lif: &LifConfig,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let y = lin.forward(tape, ctx, x)?;
    let rows = tape.reshape(y, &[shape[0] * shape[1] * shape[2], lin.fan_out])?;
    let y = bn.forward(tape, ctx, rows, 1)?;
    let y = tape.reshape(y, &[shape[0], shape[1], shape[2], lin.fan_out])?;
    tape.lif(y, lif)
}

/// STDP self-attention on binary `[t, b, n, d]` input. Returns the
/// post-normalisation membrane contribution `[t, b, n, d]`.
///
/// Each timestep is processed independently: spike counts per head become
/// latencies, pairwise latency gaps go through the signed STDP kernel, the
/// offset scores accumulate the binary values, and the scaled result is
/// re-spiked and projected.
pub fn s2tdpsa_forward<T: Scalar>(
    tape: &mut Tape<T>,
    ctx: &mut Forward<'_, T>,
    x: Var,
    weights: &AttentionWeights,
    cfg: &StdpAttentionConfig,
    lif: &LifConfig,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(contract(format!("attention input must be [t, b, n, d], got {shape:?}")));
    }
    if !is_binary(tape.value(x)) {
        return Err(contract("attention input must be binary spikes"));
    }
    let (steps, batch, tokens, dim) = (shape[0], shape[1], shape[2], shape[3]);
    cfg.validate_dim(dim)?;
    let heads = cfg.heads;
    let dh = dim / heads;
    let name = weights.name.as_str();

    for layer in ["q", "k", "v"] {
        ctx.record_input(tape, &format!("{name}.{layer}"), x);
    }
    let q = spiking_projection(tape, ctx, x, &weights.q, &weights.q_bn, lif)?;
    let k = spiking_projection(tape, ctx, x, &weights.k, &weights.k_bn, lif)?;
    let v = spiking_projection(tape, ctx, x, &weights.v, &weights.v_bn, lif)?;
    if let Some(p) = ctx.probe.as_deref_mut() {
        for s in [q, k, v] {
            p.record_block_spikes(&shape, tape.value(s));
        }
    }

    let split = |tape: &mut Tape<T>, s: Var| -> Result<Var> {
        let r = tape.reshape(s, &[steps, batch, tokens, heads, dh])?;
        tape.permute(r, &[0, 1, 3, 2, 4])
    };
    let (qh, kh, vh) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);

    let r_q = tape.sum_axis(qh, 4)?;
    let r_k = tape.sum_axis(kh, 4)?;
    let scores = stdp_scores(tape, r_q, r_k, dh, cfg)?;
    if let Some(p) = ctx.probe.as_deref_mut() {
        if p.wants_attention() {
            p.record_attention(tape.tensor(scores));
        }
    }
    ctx.record_input(tape, &format!("{name}.apply"), vh);

    let av = tape.bmm(scores, vh)?;
    let av = tape.scale(av, T::from_f64_lossy(cfg.s));
    let merged = tape.permute(av, &[0, 1, 3, 2, 4])?;
    let merged = tape.reshape(merged, &[steps, batch, tokens, dim])?;
    let attn_spikes = tape.lif(merged, lif)?;
    if let Some(p) = ctx.probe.as_deref_mut() {
        p.record_block_spikes(&shape, tape.value(attn_spikes));
    }

    ctx.record_input(tape, &format!("{name}.proj"), attn_spikes);
    let out = weights.proj.forward(tape, ctx, attn_spikes)?;
    let rows = tape.reshape(out, &[steps * batch * tokens, dim])?;
    let out = weights.proj_bn.forward(tape, ctx, rows, 1)?;
    tape.reshape(out, &[steps, batch, tokens, dim])
}

/// Score construction from per-token rates `[.., n]`: latency coding,
/// timing differences, STDP kernel, signed update and offset. Only the
/// elementwise primitives below are involved; there is no normalisation.
pub fn stdp_scores<T: Scalar>(tape: &mut Tape<T>, r_q: Var, r_k: Var, dh: usize, cfg: &StdpAttentionConfig) -> Result<Var> {
    let t_max = T::from_f64_lossy(cfg.t_max);
    let slope = -t_max / T::from_usize_lossy(dh);
    let t_q = tape.affine(r_q, slope, t_max);
    let t_k = tape.affine(r_k, slope, t_max);
    let dt = tape.pairwise_diff(t_q, t_k)?;
    let f = tape.stdp_kernel(dt, cfg.a_stdp, cfg.tau_stdp)?;
    let dw = tape.synaptic_update(dt, f)?;
    Ok(tape.affine(dw, T::one(), T::from_f64_lossy(cfg.w_offset)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::kernels;
    use crate::autodiff::finite_diff_check;
    use crate::model::probe::Probe;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_spikes(rng: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect()).unwrap()
    }

    fn setup(dim: usize, seed: u64) -> (ParamStore<f64>, AttentionWeights) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = AttentionWeights::new(&mut store, "attn", dim, &mut rng);
        (store, w)
    }

    fn run(store: &ParamStore<f64>, w: &AttentionWeights, x: &Tensor<f64>, cfg: &StdpAttentionConfig, probe: &mut Probe<f64>) -> (Tensor<f64>, Tensor<f64>) {
        let mut tape = Tape::new();
        let mut ctx = Forward::new(store, &mut tape, false).with_probe(probe);
        let xv = tape.leaf(x);
        let out = s2tdpsa_forward(&mut tape, &mut ctx, xv, w, cfg, &LifConfig::default()).unwrap();
        let scores = ctx.probe.as_ref().unwrap().attention().last().unwrap().clone();
        (tape.tensor(out), scores)
    }

    #[test]
    fn shape_is_preserved() {
        let (store, w) = setup(32, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_spikes(&mut rng, &[4, 2, 16, 32], 0.3);
        let cfg = StdpAttentionConfig::with_heads(4);
        let (out, scores) = run(&store, &w, &x, &cfg, &mut Probe::capturing_attention());
        assert_eq!(out.shape(), &[4, 2, 16, 32]);
        assert_eq!(scores.shape(), &[4, 2, 4, 16, 16]);
        let (lo, hi) = cfg.score_bounds();
        assert!(scores.data().iter().all(|&a| a >= lo && a <= hi && a > 0.0 && a < 1.0));
    }

    #[test]
    fn zero_input_gives_uniform_scores_and_bias_only_output() {
        let (mut store, w) = setup(8, 3);
        // Zero every bias so silent spikes stay silent through the projections.
        for (name, t) in store.params_mut() {
            if name.ends_with(".bias") || name.ends_with("_bn.beta") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x = Tensor::<f64>::zeros(&[2, 1, 4, 8]);
        let cfg = StdpAttentionConfig::with_heads(2);
        let (out, scores) = run(&store, &w, &x, &cfg, &mut Probe::capturing_attention());
        let uniform = cfg.w_offset - cfg.a_stdp;
        assert!(scores.data().iter().all(|&a| a == uniform));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn token_permutation_equivariance() {
        let (store, w) = setup(8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_spikes(&mut rng, &[2, 1, 4, 8], 0.5);
        let perm = [2usize, 0, 3, 1];
        let mut xp = x.clone();
        for t in 0..2 {
            for (i, &pi) in perm.iter().enumerate() {
                let src = x.data()[(t * 4 + pi) * 8..][..8].to_vec();
                xp.data_mut()[(t * 4 + i) * 8..][..8].copy_from_slice(&src);
            }
        }
        let cfg = StdpAttentionConfig::with_heads(2);
        let (out, a) = run(&store, &w, &x, &cfg, &mut Probe::capturing_attention());
        let (outp, ap) = run(&store, &w, &xp, &cfg, &mut Probe::capturing_attention());
        for t in 0..2 {
            for h in 0..2 {
                let g = (t * 2 + h) * 16;
                for i in 0..4 {
                    for j in 0..4 {
                        assert_eq!(ap.data()[g + i * 4 + j], a.data()[g + perm[i] * 4 + perm[j]]);
                    }
                }
            }
            // Accumulation order over keys changes with the permutation.
            for (i, &pi) in perm.iter().enumerate() {
                for d in 0..8 {
                    let (a, b) = (outp.data()[(t * 4 + i) * 8 + d], out.data()[(t * 4 + pi) * 8 + d]);
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn non_binary_input_rejected() {
        let (store, w) = setup(8, 6);
        let mut tape = Tape::new();
        let mut ctx = Forward::new(&store, &mut tape, false);
        let x = tape.constant(&[1, 1, 2, 8], vec![0.5; 16]).unwrap();
        assert!(s2tdpsa_forward(&mut tape, &mut ctx, x, &w, &StdpAttentionConfig::default(), &LifConfig::default()).is_err());
    }

    #[test]
    fn tape_scores_match_plain_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = StdpAttentionConfig::default();
        let q = random_spikes(&mut rng, &[2, 5, 4], 0.5);
        let k = random_spikes(&mut rng, &[2, 5, 4], 0.5);
        let (rq, rk) = kernels::token_rates(&q, &k).unwrap();
        let dt = kernels::timing_diff(
            &kernels::token_latencies(&rq, 4, cfg.t_max).unwrap(),
            &kernels::token_latencies(&rk, 4, cfg.t_max).unwrap(),
        )
        .unwrap();
        let f = kernels::stdp_kernel(&dt, cfg.a_stdp, cfg.tau_stdp).unwrap();
        let want = kernels::attention_scores(&kernels::synaptic_update(&dt, &f).unwrap(), &cfg).unwrap();

        let mut tape = Tape::new();
        let (rqv, rkv) = (tape.leaf(&rq), tape.leaf(&rk));
        let got = stdp_scores(&mut tape, rqv, rkv, 4, &cfg).unwrap();
        for (a, b) in tape.value(got).iter().zip(want.values.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rate_to_output_subgraph_passes_gradient_check() {
        // Query rates then key rates; no pair shares a latency, so the
        // kernel is differentiable everywhere it is probed.
        let cfg = StdpAttentionConfig::default();
        let rates = Tensor::<f64>::from_f64(&[8], &[0.5, 2.2, 3.1, 1.4, 0.9, 2.7, 3.6, 1.8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = random_spikes(&mut rng, &[1, 4, 3], 0.5);
        let mix = Tensor::<f64>::new(vec![1, 4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let select = |offset: usize| {
            let mut m = vec![0.0; 32];
            (0..4).for_each(|i| m[i * 8 + offset + i] = 1.0);
            Tensor::<f64>::new(vec![4, 8], m).unwrap()
        };
        let (sq, sk) = (select(0), select(4));
        let r = finite_diff_check(
            |tape, r| {
                let row = tape.reshape(r, &[1, 8])?;
                let (sqv, skv) = (tape.leaf(&sq), tape.leaf(&sk));
                let rq = tape.linear(row, sqv, None)?;
                let rk = tape.linear(row, skv, None)?;
                let a = stdp_scores(tape, rq, rk, 4, &cfg)?;
                let vv = tape.leaf(&v);
                let av = tape.bmm(a, vv)?;
                let m = tape.leaf(&mix);
                let weighted = tape.mul(av, m)?;
                Ok(tape.sum(weighted))
            },
            &rates,
            1e-6,
        )
        .unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }
}
