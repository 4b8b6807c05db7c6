//! Run configuration: a TOML file, optionally seeded from a named preset,
//! with command-line flags applied last.

use std::path::{Path, PathBuf};

use covt::data::Normalization;
use covt::model::ModelConfig;
use covt::train::{MixupConfig, SgdConfig, TrainConfig};
use covt::transformer::MlpMode;
use covt::{Error, Result};
use serde::{Deserialize, Serialize};

pub const PRESETS: [&str; 2] = ["covid-xray", "covid5k"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: String,
    pub image_size: Option<usize>,
    pub num_classes: Option<usize>,
    pub patch_size: Option<usize>,
    pub depth: Option<usize>,
    pub embed_dim: Option<usize>,
    pub num_heads: Option<usize>,
    pub stem_stride: Option<usize>,
    pub rates: Option<Vec<usize>>,
    pub mlp_mode: Option<MlpMode>,
    pub dropout: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            variant: "covt-s".into(),
            image_size: None,
            num_classes: None,
            patch_size: None,
            depth: None,
            embed_dim: None,
            num_heads: None,
            stem_stride: None,
            rates: None,
            mlp_mode: None,
            dropout: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::preset(&self.variant).ok_or_else(|| {
            Error::Config(format!("unknown variant {:?}; expected one of {:?}", self.variant, ModelConfig::PRESETS))
        })?;
        if let Some(s) = self.image_size {
            m.image_size = (s, s);
        }
        if let Some(k) = self.num_classes {
            m.num_classes = k;
        }
        if let Some(p) = self.patch_size {
            m.patch_size = p;
        }
        if let Some(d) = self.depth {
            m.encoder.depth = d;
        }
        if let Some(c) = self.embed_dim {
            m.encoder.embed_dim = c;
        }
        if let Some(h) = self.num_heads {
            m.encoder.num_heads = h;
        }
        if let Some(s) = self.stem_stride {
            m.stem.stem_stride = s;
        }
        if let Some(r) = &self.rates {
            m.stem.rates = r.clone();
        }
        if let Some(mode) = self.mlp_mode {
            m.encoder.mlp_mode = mode;
        }
        if let Some(d) = self.dropout {
            m.encoder.dropout = d;
        }
        m.validate()?;
        Ok(m)
    }

    /// Section with every override spelled out from `m`.
    pub fn explicit(m: &ModelConfig) -> Self {
        ModelSection {
            variant: m.variant.clone(),
            image_size: Some(m.image_size.0),
            num_classes: Some(m.num_classes),
            patch_size: Some(m.patch_size),
            depth: Some(m.encoder.depth),
            embed_dim: Some(m.encoder.embed_dim),
            num_heads: Some(m.encoder.num_heads),
            stem_stride: Some(m.stem.stem_stride),
            rates: Some(m.stem.rates.clone()),
            mlp_mode: Some(m.encoder.mlp_mode),
            dropout: Some(m.encoder.dropout),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub lr_start: f64,
    pub lr_end: f64,
    pub warmup_steps: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { lr_start: 0.1, lr_end: 1e-5, warmup_steps: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixupSection {
    /// Unset means the variant's default: off for covt-t, on otherwise.
    pub enabled: Option<bool>,
    pub alpha: f64,
    pub fixed_lambda: Option<f64>,
}

impl Default for MixupSection {
    fn default() -> Self {
        MixupSection { enabled: None, alpha: 0.8, fixed_lambda: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Class-folder directory; a synthetic set is generated when unset.
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    /// Held-out share of the training set when no `val` directory is given.
    pub val_fraction: f64,
    pub synth_per_class: Option<usize>,
    pub synth_noise: Option<f64>,
    pub normalization: Option<Normalization>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub out: PathBuf,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub optimizer: SgdConfig,
    pub mixup: MixupSection,
    pub data: DataSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            epochs: 100,
            batch_size: 64,
            out: PathBuf::from("runs/covt"),
            checkpoint_every: 0,
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            optimizer: SgdConfig::default(),
            mixup: MixupSection::default(),
            data: DataSection::default(),
        }
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let batch_size = match name {
            "covid-xray" => 64,
            "covid5k" => 128,
            _ => return Err(Error::Config(format!("unknown preset {name:?}; expected one of {PRESETS:?}"))),
        };
        Ok(RunConfig { batch_size, out: PathBuf::from(format!("runs/{name}")), ..RunConfig::default() })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn mixup(&self, model: &ModelConfig) -> MixupConfig {
        MixupConfig {
            enabled: self.mixup.enabled.unwrap_or(model.variant != "covt-t"),
            alpha: self.mixup.alpha,
            fixed_lambda: self.mixup.fixed_lambda,
        }
    }

    pub fn train_config(&self, model: &ModelConfig) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_start: self.schedule.lr_start,
            lr_end: self.schedule.lr_end,
            warmup_steps: self.schedule.warmup_steps,
            sgd: self.optimizer,
            mixup: self.mixup(model),
            seed: self.seed,
        }
    }

    /// Copy with every default made explicit, as written into run folders.
    pub fn resolved(&self) -> Result<Self> {
        let model = self.model.resolve()?;
        let mut out = self.clone();
        out.mixup.enabled = Some(self.mixup(&model).enabled);
        out.model = ModelSection::explicit(&model);
        out.data.normalization = Some(self.data.normalization.unwrap_or_default());
        Ok(out)
    }
}
