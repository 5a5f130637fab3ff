//! Plain `key = value` run configuration with dotted sections.
//!
//! ```text
//! # comment
//! model.depth = 2
//! model.sps_stages = spe:32,sped:64,sped:64
//! attention.heads = 4
//! train.optimizer = adamw
//! ```
//!
//! Unknown keys are rejected. Keys not present keep the toy defaults.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::data::DataFormat;
use crate::error::{config, Result};
use crate::model::{ModelConfig, SpsStage, StageKind};
use crate::tensor::SurrogateKind;
use crate::train::{LrSchedule, OptimizerKind, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_format: DataFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { model: ModelConfig::toy(), train: TrainConfig::default(), data_format: DataFormat::Synthetic }
    }
}

pub const KEYS: &[&str] = &[
    "model.timesteps",
    "model.depth",
    "model.embed_dim",
    "model.num_classes",
    "model.in_channels",
    "model.height",
    "model.width",
    "model.stem_channels",
    "model.sps_stages",
    "model.mlp_ratio",
    "lif.v_th",
    "lif.v_reset",
    "lif.beta",
    "lif.surrogate",
    "lif.surrogate_width",
    "attention.heads",
    "attention.a_stdp",
    "attention.tau_stdp",
    "attention.w_offset",
    "attention.t_max",
    "attention.s",
    "train.epochs",
    "train.batch_size",
    "train.learning_rate",
    "train.weight_decay",
    "train.optimizer",
    "train.momentum",
    "train.seed",
    "train.lr_schedule",
    "train.flip",
    "train.crop_padding",
    "data.format",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| config(format!("{key}: cannot parse {v:?}")))
}

fn stages(key: &str, v: &str) -> Result<Vec<SpsStage>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|item| {
            let (kind, ch) = item.trim().split_once(':').ok_or_else(|| config(format!("{key}: expected kind:channels, got {item:?}")))?;
            let kind = match kind.trim() {
                "spe" => StageKind::Spe,
                "sped" => StageKind::Sped,
                other => return Err(config(format!("{key}: unknown stage kind {other:?}"))),
            };
            Ok(SpsStage { kind, channels: num(key, ch.trim())? })
        })
        .collect()
}

fn unknown(key: &str, v: &str) -> crate::error::Error {
    config(format!("{key}: unknown value {v:?}"))
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "model.timesteps" => m.timesteps = num(key, v)?,
            "model.depth" => m.depth = num(key, v)?,
            "model.embed_dim" => m.embed_dim = num(key, v)?,
            "model.num_classes" => m.num_classes = num(key, v)?,
            "model.in_channels" => m.in_channels = num(key, v)?,
            "model.height" => m.height = num(key, v)?,
            "model.width" => m.width = num(key, v)?,
            "model.stem_channels" => m.stem_channels = num(key, v)?,
            "model.sps_stages" => m.sps_stages = stages(key, v)?,
            "model.mlp_ratio" => m.mlp_ratio = num(key, v)?,
            "lif.v_th" => m.lif.v_th = num(key, v)?,
            "lif.v_reset" => m.lif.v_reset = num(key, v)?,
            "lif.beta" => m.lif.beta = num(key, v)?,
            "lif.surrogate" => {
                m.lif.surrogate.kind = match v {
                    "rectangular" => SurrogateKind::Rectangular,
                    "triangular" => SurrogateKind::Triangular,
                    _ => return Err(unknown(key, v)),
                }
            }
            "lif.surrogate_width" => m.lif.surrogate.width = num(key, v)?,
            "attention.heads" => m.attention.heads = num(key, v)?,
            "attention.a_stdp" => m.attention.a_stdp = num(key, v)?,
            "attention.tau_stdp" => m.attention.tau_stdp = num(key, v)?,
            "attention.w_offset" => m.attention.w_offset = num(key, v)?,
            "attention.t_max" => m.attention.t_max = num(key, v)?,
            "attention.s" => m.attention.s = num(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.learning_rate" => t.learning_rate = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.optimizer" => t.optimizer = OptimizerKind::parse(v).ok_or_else(|| unknown(key, v))?,
            "train.momentum" => t.momentum = num(key, v)?,
            "train.seed" => t.seed = num(key, v)?,
            "train.lr_schedule" => t.lr_schedule = LrSchedule::parse(v).ok_or_else(|| unknown(key, v))?,
            "train.flip" => t.flip = num(key, v)?,
            "train.crop_padding" => t.crop_padding = num(key, v)?,
            "data.format" => self.data_format = DataFormat::parse(v).ok_or_else(|| unknown(key, v))?,
            _ => return Err(config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.as_ref().split_once('=').ok_or_else(|| config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Parses a configuration text on top of the defaults and validates it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Every key, in [`KEYS`] order. `parse(emit(c)) == c`.
    pub fn emit(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let stages: Vec<String> = m
            .sps_stages
            .iter()
            .map(|s| format!("{}:{}", if s.kind == StageKind::Spe { "spe" } else { "sped" }, s.channels))
            .collect();
        let surrogate = match m.lif.surrogate.kind {
            SurrogateKind::Rectangular => "rectangular",
            SurrogateKind::Triangular => "triangular",
        };
        let values: Vec<String> = vec![
            m.timesteps.to_string(),
            m.depth.to_string(),
            m.embed_dim.to_string(),
            m.num_classes.to_string(),
            m.in_channels.to_string(),
            m.height.to_string(),
            m.width.to_string(),
            m.stem_channels.to_string(),
            stages.join(","),
            m.mlp_ratio.to_string(),
            m.lif.v_th.to_string(),
            m.lif.v_reset.to_string(),
            m.lif.beta.to_string(),
            surrogate.to_string(),
            m.lif.surrogate.width.to_string(),
            m.attention.heads.to_string(),
            m.attention.a_stdp.to_string(),
            m.attention.tau_stdp.to_string(),
            m.attention.w_offset.to_string(),
            m.attention.t_max.to_string(),
            m.attention.s.to_string(),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.learning_rate.to_string(),
            t.weight_decay.to_string(),
            t.optimizer.name().to_string(),
            t.momentum.to_string(),
            t.seed.to_string(),
            t.lr_schedule.name().to_string(),
            t.flip.to_string(),
            t.crop_padding.to_string(),
            self.data_format.name().to_string(),
        ];
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.emit()).unwrap(), c);
    }

    #[test]
    fn overrides_and_comments() {
        let c = RunConfig::parse("# toy\nmodel.depth = 1 # shallow\ntrain.optimizer=sgd_momentum\n").unwrap();
        assert_eq!(c.model.depth, 1);
        assert_eq!(c.train.optimizer, OptimizerKind::SgdMomentum);
        let mut c = c;
        c.apply_overrides(&["attention.heads=2"]).unwrap();
        assert_eq!(c.model.attention.heads, 2);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(RunConfig::parse("model.colour = red").is_err());
        assert!(RunConfig::parse("model.depth").is_err());
        assert!(RunConfig::parse("attention.w_offset = 0.3").is_err());
        assert!(RunConfig::parse("model.sps_stages = spe:32,big:64").is_err());
    }
}
