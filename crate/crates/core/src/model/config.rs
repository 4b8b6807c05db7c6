use serde::{Deserialize, Serialize};

use crate::nn::Conv2dSpec;
use crate::stem::StemConfig;
use crate::transformer::{EncoderConfig, MlpMode};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `covt-s`, `covt-t`, `micro`, `tiny` or any custom label.
    pub variant: String,
    pub image_size: (usize, usize),
    pub stem: StemConfig,
    /// Patch edge on the stem's output grid.
    pub patch_size: usize,
    pub encoder: EncoderConfig,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::covt_s()
    }
}

impl ModelConfig {
    pub const PRESETS: [&'static str; 4] = ["covt-s", "covt-t", "micro", "tiny"];

    fn shaped(variant: &str, image: usize, stem_channels: usize, embed_dim: usize, heads: usize, depth: usize) -> Self {
        ModelConfig {
            variant: variant.into(),
            image_size: (image, image),
            stem: StemConfig { stem_channels, branch_channels: embed_dim / 8, ..StemConfig::default() },
            patch_size: 4,
            encoder: EncoderConfig { depth, embed_dim, num_heads: heads, ..EncoderConfig::default() },
            num_classes: 2,
        }
    }

    /// Small-DeiT shape: 12 blocks, width 384, 6 heads.
    pub fn covt_s() -> Self {
        Self::shaped("covt-s", 64, 64, 384, 6, 12)
    }

    /// Tiny-DeiT shape: 12 blocks, width 192, 3 heads.
    pub fn covt_t() -> Self {
        Self::shaped("covt-t", 64, 64, 192, 3, 12)
    }

    /// 32x32 images, 2 blocks of width 32.
    pub fn micro() -> Self {
        Self::shaped("micro", 32, 16, 32, 2, 2)
    }

    /// 16x16 images, one block of width 8; sized for full finite-difference checks.
    pub fn tiny() -> Self {
        let mut cfg = Self::shaped("tiny", 16, 4, 8, 2, 1);
        cfg.stem.branch_channels = 2;
        cfg
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "covt-s" => Some(Self::covt_s()),
            "covt-t" => Some(Self::covt_t()),
            "micro" => Some(Self::micro()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn stem_grid(&self) -> Result<(usize, usize)> {
        self.stem.output_grid(self.image_size.0, self.image_size.1)
    }

    pub fn num_tokens(&self) -> Result<usize> {
        let (gh, gw) = self.stem_grid()?;
        Ok((gh / self.patch_size) * (gw / self.patch_size) + 1)
    }

    pub fn patch_spec(&self) -> Conv2dSpec {
        Conv2dSpec::new(self.stem.out_channels(), self.encoder.embed_dim, self.patch_size).stride(self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.stem.validate()?;
        self.encoder.validate()?;
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let (gh, gw) = self.stem_grid()?;
        if self.patch_size == 0 || gh % self.patch_size != 0 || gw % self.patch_size != 0 {
            return Err(Error::Config(format!("stem grid {gh}x{gw} not divisible by patch size {}", self.patch_size)));
        }
        Ok(())
    }
}

/// Exact trainable parameter count of the network `config` describes.
pub fn count_params(config: &ModelConfig) -> usize {
    let s = &config.stem;
    let conv = |spec: Conv2dSpec| spec.weight_shape().iter().product::<usize>() + spec.out_channels;
    let stem = conv(s.stem_spec()) + s.rates.iter().map(|&r| conv(s.branch_spec(r))).sum::<usize>();
    let e = &config.encoder;
    let (c, hd) = (e.embed_dim, e.mlp_hidden());
    let tokens = config.num_tokens().unwrap_or(0);
    let embed = conv(config.patch_spec()) + c + tokens * c;
    let mlp = (c * hd + hd) + (hd * c + c);
    let mlp = if e.mlp_mode == MlpMode::ImprovedUnshared { 2 * mlp } else { mlp };
    let block = 2 * (2 * c) + 4 * (c * c + c) + mlp;
    stem + embed + e.depth * block + 2 * c + c * config.num_classes + config.num_classes
}

/// Multiply-accumulates of one single-image forward pass, counting
/// convolutions and matrix products only.
pub fn count_flops(config: &ModelConfig) -> u64 {
    let s = &config.stem;
    let (h, w) = config.image_size;
    let Ok((gh, gw)) = config.stem_grid() else { return 0 };
    let stem = s.stem_spec().macs(h, w).unwrap_or(0)
        + s.rates.iter().map(|&r| s.branch_spec(r).macs(gh, gw).unwrap_or(0)).sum::<u64>();
    let embed = config.patch_spec().macs(gh, gw).unwrap_or(0);
    let e = &config.encoder;
    let (n, c, hd) = (config.num_tokens().unwrap_or(0) as u64, e.embed_dim as u64, e.mlp_hidden() as u64);
    let attention = 4 * n * c * c + 2 * n * n * c;
    let mlp = 2 * n * c * hd;
    let global = if e.mlp_mode == MlpMode::Original { 0 } else { 2 * c * hd };
    stem + embed + e.depth as u64 * (attention + mlp + global) + c * config.num_classes as u64
}
