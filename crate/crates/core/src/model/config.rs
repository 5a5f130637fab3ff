use serde::{Deserialize, Serialize};

use crate::attention::StdpAttentionConfig;
use crate::error::{config, Result};
use crate::lif::LifConfig;

/// Patch-splitting stage: `SPE` keeps resolution, `SPED` max-pools by two
/// before its convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageKind {
    Spe,
    Sped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpsStage {
    pub kind: StageKind,
    pub channels: usize,
}

impl SpsStage {
    pub fn spe(channels: usize) -> Self {
        Self { kind: StageKind::Spe, channels }
    }

    pub fn sped(channels: usize) -> Self {
        Self { kind: StageKind::Sped, channels }
    }
}

/// Architecture description shared by the network and the profiler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub timesteps: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of the encoding convolution that sees raw pixels.
    pub stem_channels: usize,
    pub sps_stages: Vec<SpsStage>,
    pub mlp_ratio: f64,
    pub lif: LifConfig,
    pub attention: StdpAttentionConfig,
}

impl ModelConfig {
    /// CIFAR layout `depth-dim`: 32x32 RGB input, channel ladder
    /// `dim/8 -> dim/4 -> dim/2 -> dim -> dim` over SPE, SPE, SPED, SPED,
    /// giving an 8x8 grid of 64 tokens.
    pub fn cifar(depth: usize, embed_dim: usize, num_classes: usize) -> Self {
        Self {
            timesteps: 4,
            depth,
            embed_dim,
            num_classes,
            in_channels: 3,
            height: 32,
            width: 32,
            stem_channels: embed_dim / 8,
            sps_stages: vec![
                SpsStage::spe(embed_dim / 4),
                SpsStage::spe(embed_dim / 2),
                SpsStage::sped(embed_dim),
                SpsStage::sped(embed_dim),
            ],
            mlp_ratio: 4.0,
            lif: LifConfig::default(),
            attention: StdpAttentionConfig::with_heads(if embed_dim.is_multiple_of(12) { 12 } else { 8 }),
        }
    }

    /// Desk-scale configuration for the 16x16 synthetic shape task.
    pub fn toy() -> Self {
        Self {
            timesteps: 4,
            depth: 2,
            embed_dim: 64,
            num_classes: 4,
            in_channels: 3,
            height: 16,
            width: 16,
            stem_channels: 16,
            sps_stages: vec![SpsStage::spe(32), SpsStage::sped(64), SpsStage::sped(64)],
            mlp_ratio: 4.0,
            lif: LifConfig::default(),
            attention: StdpAttentionConfig::with_heads(4),
        }
    }

    pub fn downsampling(&self) -> usize {
        1 << self.sps_stages.iter().filter(|s| s.kind == StageKind::Sped).count()
    }

    pub fn grid(&self) -> (usize, usize) {
        let f = self.downsampling();
        (self.height / f, self.width / f)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.attention.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("timesteps", self.timesteps),
            ("depth", self.depth),
            ("embed_dim", self.embed_dim),
            ("num_classes", self.num_classes),
            ("in_channels", self.in_channels),
            ("height", self.height),
            ("width", self.width),
            ("stem_channels", self.stem_channels),
        ] {
            if v == 0 {
                return Err(config(format!("model.{name} must be positive")));
            }
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(config(format!("model.mlp_ratio must be positive, got {}", self.mlp_ratio)));
        }
        self.lif.validate()?;
        self.attention.validate_dim(self.embed_dim)?;
        let last = self.sps_stages.last().map_or(self.stem_channels, |s| s.channels);
        if last != self.embed_dim {
            return Err(config(format!("patch splitting ends at {last} channels, expected embed_dim {}", self.embed_dim)));
        }
        if self.sps_stages.iter().any(|s| s.channels == 0) {
            return Err(config("patch splitting stages need positive channel counts"));
        }
        let f = self.downsampling();
        if !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return Err(config(format!(
                "input {}x{} is not divisible by the cumulative downsampling factor {f}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_grid_is_64_tokens() {
        let c = ModelConfig::cifar(4, 384, 10);
        c.validate().unwrap();
        assert_eq!(c.grid(), (8, 8));
        assert_eq!(c.tokens(), 64);
    }

    #[test]
    fn rejects_bad_layouts() {
        let mut c = ModelConfig::toy();
        c.height = 18;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.sps_stages.last_mut().unwrap().channels = 32;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.attention.heads = 5;
        assert!(c.validate().is_err());
    }
}
