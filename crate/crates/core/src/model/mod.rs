//! Full network: stem, tokenizer, encoder stack, class-token head.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, TrainState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{count_flops, count_params, ModelConfig};

use rand::Rng;

use crate::nn::{Forward, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::rng::{SeedTree, INIT};
use crate::stem::CnnStem;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::transformer::{Encoder, MlpMode, Tokenizer};
use crate::{Context, Error, Result};

#[derive(Debug, Clone)]
pub struct Covt {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub stem: CnnStem,
    pub tokenizer: Tokenizer,
    pub encoder: Encoder,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl Covt {
    /// Builds the network with weights drawn from the `init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_rng(config, &mut SeedTree::new(seed).stream(INIT))
    }

    pub fn with_rng(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let stem = CnnStem::new(&mut params, config.stem.clone(), rng)?;
        let grid = config.stem_grid()?;
        let c = config.encoder.embed_dim;
        let tokenizer = Tokenizer::new(&mut params, config.stem.out_channels(), c, config.patch_size, grid, rng)?;
        let encoder = Encoder::new(&mut params, &config.encoder, rng)?;
        let norm = LayerNorm::new(&mut params, "norm", c)?;
        let head = Linear::new(&mut params, "head", c, config.num_classes, rng)?;
        Ok(Covt { config, params, stem, tokenizer, encoder, norm, head })
    }

    /// `[B, 3, H, W]` images to `[B, num_classes]` logits.
    pub fn forward<'t>(&self, f: &Forward<'_, 't>, images: Var<'t>) -> Result<Var<'t>> {
        let shape = images.shape();
        let (h, w) = self.config.image_size;
        if shape.len() != 4 || shape[1..] != [self.config.stem.in_channels, h, w] {
            return Err(TensorError::ShapeMismatch {
                op: "model input",
                lhs: shape,
                rhs: vec![self.config.stem.in_channels, h, w],
            }
            .into());
        }
        let batch = shape[0];
        let fmap = self.stem.forward(f, images)?;
        let tokens = self.tokenizer.forward(f, fmap).at(|| "embed".into())?;
        let encoded = self.encoder.forward(f, tokens)?;
        let c = self.config.encoder.embed_dim;
        let cls = encoded.slice(1, 0, 1)?.reshape([batch, c])?;
        let head = || -> Result<Var<'t>> { Ok(self.head.forward(f, self.norm.forward(f, cls)?)?) };
        head().at(|| "head".into())
    }

    /// Inference-mode logits for a batch of images.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let f = Forward::eval(&tape, &bound);
        Ok(self.forward(&f, tape.constant(images.clone()))?.value())
    }

    /// Same network with a different block-MLP wiring. Shared-weight and
    /// per-token modes keep every parameter; the unshared mode is built
    /// fresh from `seed`.
    pub fn with_mlp_mode(&self, mode: MlpMode, seed: u64) -> Result<Self> {
        let mut config = self.config.clone();
        config.encoder.mlp_mode = mode;
        let mut out = Covt::new(config, seed)?;
        for (name, t) in self.params.iter() {
            if let Some(slot) = out.params.by_name_mut(name) {
                *slot = t.clone();
            }
        }
        Ok(out)
    }

    /// Copies every parameter from `other`, which must have identical names
    /// and shapes in the same order.
    pub fn load_params(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        check_compatible(&self.params, other)?;
        for ((_, slot), (_, t)) in self.params.iter_mut().zip(other) {
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }
}

fn check_compatible(store: &ParamStore, other: &[(String, Tensor)]) -> Result<()> {
    for (i, (name, t)) in store.iter().enumerate() {
        match other.get(i) {
            Some((on, ot)) if on == name && ot.shape() == t.shape() => {}
            Some((on, ot)) => {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch at #{i}: model has {name} {:?}, checkpoint has {on} {:?}",
                    t.shape(),
                    ot.shape()
                )))
            }
            None => return Err(Error::Checkpoint(format!("checkpoint ends before parameter {name} {:?}", t.shape()))),
        }
    }
    if other.len() > store.len() {
        let (name, t) = &other[store.len()];
        return Err(Error::Checkpoint(format!("unexpected extra parameter {name} {:?}", t.shape())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logits_shape_and_zero_network() {
        let mut model = Covt::new(ModelConfig::micro(), 1).unwrap();
        let x = Tensor::from_fn([2, 3, 32, 32], |i| (i as f64 * 0.01).sin());
        assert_eq!(model.logits(&x).unwrap().shape(), &[2, 2]);

        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            model.params.get_mut(id).data_mut().fill(0.0);
        }
        let bias = model.head.bias;
        *model.params.get_mut(bias) = Tensor::new([2], vec![0.75, -0.5]).unwrap();
        let y = model.logits(&x).unwrap();
        assert_eq!(y.data(), &[0.75, -0.5, 0.75, -0.5]);
    }

    #[test]
    fn forward_is_pure() {
        let model = Covt::new(ModelConfig::micro(), 5).unwrap();
        let x = Tensor::from_fn([1, 3, 32, 32], |i| (i as f64 * 0.37).cos());
        let a = model.logits(&x).unwrap();
        let b = model.logits(&x).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(a.data(), Covt::new(ModelConfig::micro(), 5).unwrap().logits(&x).unwrap().data());
    }

    #[test]
    fn input_shape_errors_carry_context() {
        let model = Covt::new(ModelConfig::micro(), 0).unwrap();
        let err = model.logits(&Tensor::zeros([1, 3, 16, 16])).unwrap_err();
        assert!(err.to_string().contains("model input"), "{err}");
    }

    #[test]
    fn param_names_follow_scheme() {
        let model = Covt::new(ModelConfig::micro(), 0).unwrap();
        for name in
            ["stem.conv.weight", "stem.branch2.weight", "blocks.1.mlp.fc1.bias", "embed.cls_token", "head.weight"]
        {
            assert!(model.params.id(name).is_some(), "{name}");
        }
        assert_eq!(model.params.numel(), count_params(&model.config));
    }

    #[test]
    fn load_params_reports_first_mismatch() {
        let mut a = Covt::new(ModelConfig::micro(), 0).unwrap();
        let mut cfg = ModelConfig::micro();
        cfg.encoder.embed_dim = 16;
        let b = Covt::new(cfg, 0).unwrap();
        let err = a.load_params(&b.named_params()).unwrap_err().to_string();
        assert!(err.contains("embed.proj.weight"), "{err}");
        assert!(err.contains("[32, 16, 4, 4]") && err.contains("[16, 16, 4, 4]"), "{err}");
    }
}
