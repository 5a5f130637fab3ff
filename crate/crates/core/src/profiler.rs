//! Operation counts, firing rates and the 45 nm energy model.
//!
//! Every spiking layer is charged one accumulate (0.9 pJ) per synaptic
//! operation `SOP = f * T * FLOPs`; the encoding convolution, which sees
//! analog pixels, is charged one multiply-accumulate (46 pJ) per FLOP.
//! Normalisation layers are assumed folded into the preceding weights.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::{Model, ModelConfig, Probe, StageKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const E_MAC_PJ: f64 = 46.0;
pub const E_AC_PJ: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Linear,
    AttentionApply,
    Other,
}

/// Shapes needed to count one layer's MACs for a single image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { c_in: usize, c_out: usize, kernel: usize, out_h: usize, out_w: usize },
    Linear { in_features: usize, out_features: usize, tokens: usize },
    AttentionApply { batch: usize, heads: usize, tokens: usize, head_dim: usize },
    BatchNorm { channels: usize },
    Other { description: String },
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            Self::Conv { .. } => LayerKind::Conv,
            Self::Linear { .. } => LayerKind::Linear,
            Self::AttentionApply { .. } => LayerKind::AttentionApply,
            Self::BatchNorm { .. } | Self::Other { .. } => LayerKind::Other,
        }
    }
}

/// MAC count of one layer for one timestep.
pub fn flops_of_layer(spec: &LayerSpec) -> Result<u64> {
    let v = match *spec {
        LayerSpec::Conv { c_in, c_out, kernel, out_h, out_w } => c_out * out_h * out_w * kernel * kernel * c_in,
        LayerSpec::Linear { in_features, out_features, tokens } => out_features * in_features * tokens,
        LayerSpec::AttentionApply { batch, heads, tokens, head_dim } => batch * heads * tokens * tokens * head_dim,
        LayerSpec::BatchNorm { .. } => 0,
        LayerSpec::Other { ref description } => {
            return Err(contract(format!("no operation count for layer kind {description:?}")))
        }
    };
    Ok(v as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedLayer {
    pub name: String,
    pub spec: LayerSpec,
}

/// Counted layers of `cfg` for one image, named as the forward pass names
/// their inputs. The classification head is not included.
pub fn layer_specs(cfg: &ModelConfig) -> Vec<NamedLayer> {
    let mut out = Vec::new();
    let (mut h, mut w) = (cfg.height, cfg.width);
    let push = |out: &mut Vec<NamedLayer>, name: String, spec| out.push(NamedLayer { name, spec });
    push(
        &mut out,
        "sps.stem".into(),
        LayerSpec::Conv { c_in: cfg.in_channels, c_out: cfg.stem_channels, kernel: 3, out_h: h, out_w: w },
    );
    let mut c = cfg.stem_channels;
    for (i, st) in cfg.sps_stages.iter().enumerate() {
        if st.kind == StageKind::Sped {
            h /= 2;
            w /= 2;
        }
        push(&mut out, format!("sps.stage{i}"), LayerSpec::Conv { c_in: c, c_out: st.channels, kernel: 3, out_h: h, out_w: w });
        c = st.channels;
    }
    let (d, n, hidden) = (cfg.embed_dim, cfg.tokens(), cfg.mlp_hidden());
    let lin = |i, o| LayerSpec::Linear { in_features: i, out_features: o, tokens: n };
    for l in 0..cfg.depth {
        let a = format!("block{l}.attn");
        for p in ["q", "k", "v"] {
            push(&mut out, format!("{a}.{p}"), lin(d, d));
        }
        push(
            &mut out,
            format!("{a}.apply"),
            LayerSpec::AttentionApply { batch: 1, heads: cfg.attention.heads, tokens: n, head_dim: cfg.head_dim() },
        );
        push(&mut out, format!("{a}.proj"), lin(d, d));
        push(&mut out, format!("block{l}.mlp.fc1"), lin(d, hidden));
        push(&mut out, format!("block{l}.mlp.fc2"), lin(hidden, d));
    }
    out
}

/// Per-timestep, per-image count of the elementwise work that builds the
/// attention scores: two rate sums over features, two latency maps, and four
/// `n x n` stages (difference, kernel, signed update, offset).
pub fn score_construction_ops(cfg: &ModelConfig) -> u64 {
    let (h, n, dh) = (cfg.attention.heads, cfg.tokens(), cfg.head_dim());
    (2 * h * n * dh + 2 * h * n + 4 * h * n * n) as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCostRecord {
    pub name: String,
    pub kind: LayerKind,
    pub flops: u64,
    /// Mean input spike probability; zero for the MAC-costed encoding layer.
    pub firing_rate: f64,
    pub sops: u64,
    /// Consumes analog input and is charged per MAC instead of per SOP.
    pub mac_costed: bool,
}

impl LayerCostRecord {
    pub fn rated(name: impl Into<String>, kind: LayerKind, flops: u64, firing_rate: f64, timesteps: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&firing_rate) {
            return Err(contract(format!("firing rate {firing_rate} outside [0, 1]")));
        }
        let sops = sop_exact(firing_rate, timesteps, flops).round() as u64;
        Ok(Self { name: name.into(), kind, flops, firing_rate, sops, mac_costed: false })
    }

    pub fn encoding(name: impl Into<String>, kind: LayerKind, flops: u64) -> Self {
        Self { name: name.into(), kind, flops, firing_rate: 0.0, sops: 0, mac_costed: true }
    }
}

fn sop_exact(f: f64, t: usize, flops: u64) -> f64 {
    f * t as f64 * flops as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub timesteps: usize,
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
    pub first_layer_flops: u64,
    /// Unrounded sum of `f * T * FLOPs` over rated layers.
    pub total_sops: f64,
    pub energy_mj_snn: f64,
    pub energy_mj_ann: f64,
    /// `1 - snn / ann`.
    pub reduction: f64,
    /// Score-construction accumulates over all blocks and timesteps, kept out
    /// of `energy_mj_snn`.
    pub score_ops: u64,
    pub energy_mj_snn_with_scores: f64,
    pub layers: Vec<LayerCostRecord>,
}

/// Energy of `layers` at `timesteps` steps. Rated layers are re-costed at
/// the given `timesteps`; `score_ops_per_step` is the per-step score work.
pub fn energy_estimate(layers: &[LayerCostRecord], timesteps: usize, score_ops_per_step: u64) -> Result<EnergyReport> {
    let mut out = Vec::with_capacity(layers.len());
    let mut first = 0u64;
    let mut total_sops = 0.0;
    let mut all_flops = 0u64;
    for l in layers {
        all_flops += l.flops;
        if l.mac_costed {
            first += l.flops;
            out.push(l.clone());
        } else {
            let r = LayerCostRecord::rated(l.name.clone(), l.kind, l.flops, l.firing_rate, timesteps)?;
            total_sops += sop_exact(l.firing_rate, timesteps, l.flops);
            out.push(r);
        }
    }
    let energy_mj_snn = (E_AC_PJ * total_sops + E_MAC_PJ * first as f64) * 1e-9;
    let energy_mj_ann = E_MAC_PJ * all_flops as f64 * 1e-9;
    let score_ops = score_ops_per_step * timesteps as u64;
    Ok(EnergyReport {
        timesteps,
        e_mac_pj: E_MAC_PJ,
        e_ac_pj: E_AC_PJ,
        first_layer_flops: first,
        total_sops,
        energy_mj_snn,
        energy_mj_ann,
        reduction: if energy_mj_ann > 0.0 { 1.0 - energy_mj_snn / energy_mj_ann } else { 0.0 },
        score_ops,
        energy_mj_snn_with_scores: energy_mj_snn + E_AC_PJ * score_ops as f64 * 1e-9,
        layers: out,
    })
}

impl EnergyReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let width = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{:<width$}  {:<15}  {:>14}  {:>8}  {:>14}\n", "layer", "kind", "flops", "rate", "sops");
        for l in &self.layers {
            let kind = match l.kind {
                LayerKind::Conv => "conv",
                LayerKind::Linear => "linear",
                LayerKind::AttentionApply => "attention_apply",
                LayerKind::Other => "other",
            };
            let rate = if l.mac_costed { "MAC".to_string() } else { format!("{:.4}", l.firing_rate) };
            s.push_str(&format!("{:<width$}  {:<15}  {:>14}  {:>8}  {:>14}\n", l.name, kind, l.flops, rate, l.sops));
        }
        s.push_str(&format!("timesteps            {}\n", self.timesteps));
        s.push_str(&format!("first layer MACs     {}\n", self.first_layer_flops));
        s.push_str(&format!("total SOPs           {:.0}\n", self.total_sops));
        s.push_str(&format!("score ops            {}\n", self.score_ops));
        s.push_str(&format!("energy SNN (mJ)      {:.6}\n", self.energy_mj_snn));
        s.push_str(&format!("energy SNN+scores    {:.6}\n", self.energy_mj_snn_with_scores));
        s.push_str(&format!("energy ANN (mJ)      {:.6}\n", self.energy_mj_ann));
        s.push_str(&format!("reduction            {:.2}%\n", 100.0 * self.reduction));
        s
    }
}

/// Input firing rate of every counted layer over `images` (inference mode).
/// The encoding convolution reports `None`.
pub fn measure_firing_rates<T: Scalar>(model: &Model<T>, images: &Tensor<T>) -> Result<Vec<(String, Option<f64>)>> {
    let mut probe = Probe::new();
    model.predict(images, Some(&mut probe))?;
    Ok(layer_specs(&model.config)
        .into_iter()
        .map(|l| {
            let rate = if l.name == "sps.stem" { None } else { probe.layer(&l.name).map(|a| a.firing_rate()) };
            (l.name, rate)
        })
        .collect())
}

/// Cost records for `model` with firing rates measured on `images`.
pub fn cost_records<T: Scalar>(model: &Model<T>, images: &Tensor<T>) -> Result<Vec<LayerCostRecord>> {
    let rates = measure_firing_rates(model, images)?;
    let t = model.config.timesteps;
    layer_specs(&model.config)
        .into_iter()
        .zip(rates)
        .map(|(l, (_, rate))| {
            let flops = flops_of_layer(&l.spec)?;
            match rate {
                None => Ok(LayerCostRecord::encoding(l.name, l.spec.kind(), flops)),
                Some(f) => LayerCostRecord::rated(l.name, l.spec.kind(), flops, f, t),
            }
        })
        .collect()
}

/// Full energy report of `model` on a sample of images.
pub fn profile<T: Scalar>(model: &Model<T>, images: &Tensor<T>) -> Result<EnergyReport> {
    let records = cost_records(model, images)?;
    let per_step = score_construction_ops(&model.config) * model.config.depth as u64;
    energy_estimate(&records, model.config.timesteps, per_step)
}

/// Bytes needed to hold one dense `n x n` attention matrix.
pub fn attention_memory_footprint(n: usize, bytes_per_element: usize) -> Result<u64> {
    if n == 0 {
        return Err(contract("sequence length must be at least 1"));
    }
    Ok((n as u64) * (n as u64) * bytes_per_element as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub tokens: usize,
    pub bytes: u64,
    pub mib: f64,
    pub gib: f64,
    /// Scores are rebuilt from token latencies every step and never stored
    /// between steps.
    pub persistent: bool,
}

pub fn footprint_report(n: usize, bytes_per_element: usize) -> Result<FootprintReport> {
    let bytes = attention_memory_footprint(n, bytes_per_element)?;
    Ok(FootprintReport {
        tokens: n,
        bytes,
        mib: bytes as f64 / (1u64 << 20) as f64,
        gib: bytes as f64 / (1u64 << 30) as f64,
        persistent: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flop_examples() {
        let conv = LayerSpec::Conv { c_in: 3, c_out: 16, kernel: 3, out_h: 32, out_w: 32 };
        assert_eq!(flops_of_layer(&conv).unwrap(), 442_368);
        let lin = LayerSpec::Linear { in_features: 384, out_features: 384, tokens: 64 };
        assert_eq!(flops_of_layer(&lin).unwrap(), 9_437_184);
        assert_eq!(flops_of_layer(&LayerSpec::BatchNorm { channels: 8 }).unwrap(), 0);
        assert!(flops_of_layer(&LayerSpec::Other { description: "lut".into() }).is_err());
    }

    #[test]
    fn single_layer_energy() {
        let r = LayerCostRecord::rated("c", LayerKind::Conv, 1000, 0.25, 4).unwrap();
        assert_eq!(r.sops, 1000);
        let e = energy_estimate(&[r], 4, 0).unwrap();
        assert!((e.energy_mj_snn - 900.0e-9).abs() < 1e-18);
    }

    #[test]
    fn zero_firing_leaves_only_encoding_cost() {
        let layers = vec![
            LayerCostRecord::encoding("stem", LayerKind::Conv, 5000),
            LayerCostRecord::rated("a", LayerKind::Linear, 7000, 0.0, 4).unwrap(),
        ];
        let e = energy_estimate(&layers, 4, 0).unwrap();
        assert_eq!(e.energy_mj_snn, 46.0 * 5000.0 * 1e-9);
        assert_eq!(e.energy_mj_ann, 46.0 * 12000.0 * 1e-9);
    }

    #[test]
    fn footprints() {
        assert_eq!(attention_memory_footprint(512, 4).unwrap(), 1 << 20);
        assert_eq!(footprint_report(4096, 4).unwrap().mib, 64.0);
        assert_eq!(footprint_report(16384, 4).unwrap().gib, 1.0);
        assert!(attention_memory_footprint(0, 4).is_err());
    }

    #[test]
    fn toy_layer_names_cover_probe_names() {
        let cfg = ModelConfig::toy();
        let names: Vec<String> = layer_specs(&cfg).into_iter().map(|l| l.name).collect();
        assert_eq!(names.len(), 1 + cfg.sps_stages.len() + 7 * cfg.depth);
        assert!(names.contains(&"block1.attn.apply".to_string()));
    }
}
