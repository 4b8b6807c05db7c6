//! Pre-norm encoder blocks whose MLP adds a token-averaged global branch,
//! plus the patch tokenizer that feeds them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{init, Activation, AttentionSpec, Conv2d, Conv2dSpec, Forward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError, TensorResult, Var};
use crate::{Context, Error, Result};

/// Wiring of the block MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MlpMode {
    /// Per-token MLP plus the pooled branch through the same weights.
    #[default]
    Improved,
    /// Pooled branch with its own fc1/fc2.
    ImprovedUnshared,
    /// Per-token MLP only.
    Original,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub dropout: f64,
    pub activation: Activation,
    pub mlp_mode: MlpMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            depth: 12,
            embed_dim: 384,
            num_heads: 6,
            mlp_ratio: 4.0,
            dropout: 0.0,
            activation: Activation::Gelu,
            mlp_mode: MlpMode::Improved,
        }
    }
}

impl EncoderConfig {
    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    pub fn attention(&self) -> AttentionSpec {
        AttentionSpec { embed_dim: self.embed_dim, num_heads: self.num_heads }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("encoder depth must be >= 1".into()));
        }
        if self.mlp_ratio.is_nan() || self.mlp_ratio <= 0.0 || self.mlp_hidden() == 0 {
            return Err(Error::Config(format!("mlp_ratio must be positive, got {}", self.mlp_ratio)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        self.attention().validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Per-token two-layer MLP: `fc2(act(fc1(x)))`.
pub fn original_mlp<'t>(
    x: Var<'t>,
    fc1: (Var<'t>, Var<'t>),
    fc2: (Var<'t>, Var<'t>),
    act: Activation,
) -> TensorResult<Var<'t>> {
    let hidden = act.apply(crate::nn::linear(x, fc1.0, fc1.1)?);
    crate::nn::linear(hidden, fc2.0, fc2.1)
}

/// MLP over `[B, N, C]` tokens with a global branch: the token mean
/// `[B, 1, C]` goes through `global_fc1`/`global_fc2` and the result is
/// broadcast-added to every token's own MLP output.
pub fn improved_mlp_with<'t>(
    x: Var<'t>,
    fc1: (Var<'t>, Var<'t>),
    fc2: (Var<'t>, Var<'t>),
    global_fc1: (Var<'t>, Var<'t>),
    global_fc2: (Var<'t>, Var<'t>),
    act: Activation,
) -> TensorResult<Var<'t>> {
    if x.shape().len() != 3 {
        return Err(TensorError::invalid("improved_mlp", format!("expected [B, N, C], got {:?}", x.shape())));
    }
    let local = original_mlp(x, fc1, fc2, act)?;
    let pooled = x.mean_axis(1, true)?;
    let global = original_mlp(pooled, global_fc1, global_fc2, act)?;
    local.add(global)
}

/// Shared-weight form of [`improved_mlp_with`].
pub fn improved_mlp<'t>(
    x: Var<'t>,
    fc1: (Var<'t>, Var<'t>),
    fc2: (Var<'t>, Var<'t>),
    act: Activation,
) -> TensorResult<Var<'t>> {
    improved_mlp_with(x, fc1, fc2, fc1, fc2, act)
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub global: Option<(Linear, Linear)>,
    pub mode: MlpMode,
    pub activation: Activation,
    pub dropout: f64,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let (c, hd) = (cfg.embed_dim, cfg.mlp_hidden());
        let fc1 = Linear::new(store, &format!("{prefix}.fc1"), c, hd, rng)?;
        let fc2 = Linear::new(store, &format!("{prefix}.fc2"), hd, c, rng)?;
        let global = match cfg.mlp_mode {
            MlpMode::ImprovedUnshared => Some((
                Linear::new(store, &format!("{prefix}.global_fc1"), c, hd, rng)?,
                Linear::new(store, &format!("{prefix}.global_fc2"), hd, c, rng)?,
            )),
            _ => None,
        };
        Ok(Mlp { fc1, fc2, global, mode: cfg.mlp_mode, activation: cfg.activation, dropout: cfg.dropout })
    }

    pub fn forward<'t>(&self, f: &Forward<'_, 't>, x: Var<'t>) -> TensorResult<Var<'t>> {
        let pair = |l: &Linear| (f.param(l.weight), f.param(l.bias));
        let (fc1, fc2) = (pair(&self.fc1), pair(&self.fc2));
        let out = match (&self.mode, &self.global) {
            (MlpMode::Original, _) => original_mlp(x, fc1, fc2, self.activation)?,
            (MlpMode::ImprovedUnshared, Some((g1, g2))) => {
                improved_mlp_with(x, fc1, fc2, pair(g1), pair(g2), self.activation)?
            }
            _ => improved_mlp(x, fc1, fc2, self.activation)?,
        };
        f.dropout(out, self.dropout)
    }

    pub fn param_count(&self) -> usize {
        let own = self.fc1.param_count() + self.fc2.param_count();
        own + self.global.as_ref().map_or(0, |(a, b)| a.param_count() + b.param_count())
    }
}

/// `x1 = x + attn(ln1(x)); y = x1 + mlp(ln2(x1))`
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = cfg.embed_dim;
        Ok(EncoderBlock {
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), c)?,
            attn: MultiHeadAttention::new(store, &format!("{prefix}.attn"), cfg.attention(), cfg.dropout, rng)?,
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), c)?,
            mlp: Mlp::new(store, &format!("{prefix}.mlp"), cfg, rng)?,
        })
    }

    pub fn forward<'t>(&self, f: &Forward<'_, 't>, x: Var<'t>) -> TensorResult<Var<'t>> {
        let x1 = x.add(self.attn.forward(f, self.norm1.forward(f, x)?)?)?;
        x1.add(self.mlp.forward(f, self.norm2.forward(f, x1)?)?)
    }

    pub fn param_count(&self) -> usize {
        self.norm1.param_count() + self.attn.param_count() + self.norm2.param_count() + self.mlp.param_count()
    }
}

/// Patch embedding (conv with kernel = stride = patch), class token and
/// learnable positional embedding. Parameter names: `embed.proj.*`,
/// `embed.cls_token`, `embed.pos_embed`.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub proj: Conv2d,
    pub cls: ParamId,
    pub pos: ParamId,
    pub patch: usize,
    pub num_tokens: usize,
}

/// `[B, Cf, Hf, Wf]` to `[B, (Hf/p)(Wf/p) + 1, C]`: patches in row-major
/// order after the class token, positional embedding added.
pub fn tokenize<'t>(
    fmap: Var<'t>,
    proj: (Var<'t>, Var<'t>),
    spec: &Conv2dSpec,
    cls: Var<'t>,
    pos: Var<'t>,
) -> TensorResult<Var<'t>> {
    let shape = fmap.shape();
    let patch = spec.kernel.0;
    if shape.len() != 4 || !shape[2].is_multiple_of(patch) || !shape[3].is_multiple_of(patch) {
        return Err(TensorError::invalid(
            "tokenize",
            format!("feature map {shape:?} not divisible into {patch}x{patch} patches"),
        ));
    }
    let b = shape[0];
    let patches = crate::nn::conv2d(fmap, proj.0, proj.1, spec)?;
    let ps = patches.shape();
    let (c, np) = (ps[1], ps[2] * ps[3]);
    let tokens = patches.reshape([b, c, np])?.permute(&[0, 2, 1])?;
    let cls = fmap.tape().constant(Tensor::zeros([b, 1, c])).add(cls)?;
    fmap.tape().concat(&[cls, tokens], 1)?.add(pos)
}

impl Tokenizer {
    pub fn new(
        store: &mut ParamStore,
        in_channels: usize,
        embed_dim: usize,
        patch: usize,
        grid: (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if patch == 0 || !grid.0.is_multiple_of(patch) || !grid.1.is_multiple_of(patch) {
            return Err(Error::Config(format!("grid {grid:?} not divisible by patch size {patch}")));
        }
        let spec = Conv2dSpec::new(in_channels, embed_dim, patch).stride(patch);
        let num_tokens = (grid.0 / patch) * (grid.1 / patch) + 1;
        Ok(Tokenizer {
            proj: Conv2d::new(store, "embed.proj", spec, rng)?,
            cls: store.register("embed.cls_token", init::trunc_normal([1, 1, embed_dim], 0.02, rng))?,
            pos: store.register("embed.pos_embed", init::trunc_normal([1, num_tokens, embed_dim], 0.02, rng))?,
            patch,
            num_tokens,
        })
    }

    pub fn forward<'t>(&self, f: &Forward<'_, 't>, fmap: Var<'t>) -> TensorResult<Var<'t>> {
        tokenize(
            fmap,
            (f.param(self.proj.weight), f.param(self.proj.bias)),
            &self.proj.spec,
            f.param(self.cls),
            f.param(self.pos),
        )
    }

    pub fn param_count(&self) -> usize {
        let c = self.proj.spec.out_channels;
        self.proj.param_count() + c + self.num_tokens * c
    }
}

/// Stack of encoder blocks named `blocks.{i}`.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.depth)
            .map(|i| EncoderBlock::new(store, &format!("blocks.{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Encoder { blocks })
    }

    pub fn forward<'t>(&self, f: &Forward<'_, 't>, mut x: Var<'t>) -> Result<Var<'t>> {
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(f, x).at(|| format!("blocks.{i}"))?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn weights(tape: &Tape, c: usize, hd: usize) -> [(Var<'_>, Var<'_>); 2] {
        let w = |r, k, s: f64| tape.leaf(Tensor::from_fn([r, k], |i| ((i as f64 + 1.0) * s).sin() * 0.4));
        let b = |k, s: f64| tape.leaf(Tensor::from_fn([k], |i| ((i as f64 + 1.0) * s).cos() * 0.1));
        [(w(c, hd, 0.37), b(hd, 0.91)), (w(hd, c, 0.53), b(c, 1.7))]
    }

    #[test]
    fn constant_tokens_double_the_mlp() {
        let tape = Tape::new();
        let [fc1, fc2] = weights(&tape, 4, 8);
        let x = tape.constant(Tensor::from_fn([2, 5, 4], |i| [0.3, -1.2, 0.8, 2.0][i % 4] + (i / 20) as f64));
        let y = improved_mlp(x, fc1, fc2, Activation::Gelu).unwrap().value();
        let base = original_mlp(x, fc1, fc2, Activation::Gelu).unwrap().value();
        for (a, b) in y.data().iter().zip(base.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn single_token_doubles() {
        let tape = Tape::new();
        let [fc1, fc2] = weights(&tape, 4, 8);
        let x = tape.constant(Tensor::from_fn([3, 1, 4], |i| (i as f64).sin()));
        let y = improved_mlp(x, fc1, fc2, Activation::Relu).unwrap().value();
        let base = original_mlp(x, fc1, fc2, Activation::Relu).unwrap().value();
        assert_eq!(y, base.map(|v| 2.0 * v));
    }

    #[test]
    fn zero_input_zero_bias_is_zero() {
        let tape = Tape::new();
        let w1 = tape.leaf(Tensor::from_fn([4, 6], |i| i as f64 * 0.1));
        let w2 = tape.leaf(Tensor::from_fn([6, 4], |i| i as f64 * -0.1));
        let (z6, z4) = (tape.leaf(Tensor::zeros([6])), tape.leaf(Tensor::zeros([4])));
        let x = tape.constant(Tensor::zeros([1, 3, 4]));
        let y = improved_mlp(x, (w1, z6), (w2, z4), Activation::Gelu).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn token_count_and_single_patch() {
        let tape = Tape::new();
        let spec = Conv2dSpec::new(2, 3, 4).stride(4);
        let w = tape.leaf(Tensor::ones([3, 2, 4, 4]));
        let b = tape.leaf(Tensor::zeros([3]));
        let cls = tape.leaf(Tensor::zeros([1, 1, 3]));
        let pos = tape.leaf(Tensor::zeros([1, 2, 3]));
        let fmap = tape.constant(Tensor::ones([2, 2, 4, 4]));
        let t = tokenize(fmap, (w, b), &spec, cls, pos).unwrap();
        assert_eq!(t.shape(), vec![2, 2, 3]);
        let bad = tape.constant(Tensor::ones([2, 2, 6, 4]));
        assert!(tokenize(bad, (w, b), &spec, cls, pos).is_err());
    }

    #[test]
    fn averaging_projection_yields_patch_means() {
        let tape = Tape::new();
        let (c, p) = (2, 2);
        let spec = Conv2dSpec::new(c, c, p).stride(p);
        // output channel o averages input channel o over the patch
        let w = tape.leaf(Tensor::from_fn([c, c, p, p], |i| {
            let (o, ci) = (i / (c * p * p), (i / (p * p)) % c);
            if o == ci {
                0.25
            } else {
                0.0
            }
        }));
        let b = tape.leaf(Tensor::zeros([c]));
        let cls = tape.leaf(Tensor::zeros([1, 1, c]));
        let pos = tape.leaf(Tensor::zeros([1, 5, c]));
        let fmap_t = Tensor::from_fn([1, c, 4, 4], |i| i as f64);
        let t = tokenize(tape.constant(fmap_t.clone()), (w, b), &spec, cls, pos).unwrap().value();
        for (k, (pi, pj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            for ch in 0..c {
                let mut mean = 0.0;
                for u in 0..p {
                    for v in 0..p {
                        mean += fmap_t.get(&[0, ch, pi * p + u, pj * p + v]) / 4.0;
                    }
                }
                assert!((t.get(&[0, k + 1, ch]) - mean).abs() < 1e-12);
            }
        }
        assert!(t.data()[..c].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig { num_heads: 5, ..Default::default() }.validate().is_err());
        assert!(EncoderConfig { depth: 0, ..Default::default() }.validate().is_err());
        assert!(EncoderConfig { mlp_ratio: 0.0, ..Default::default() }.validate().is_err());
        assert_eq!(EncoderConfig::default().mlp_hidden(), 1536);
    }
}
