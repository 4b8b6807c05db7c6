use covt::model::{count_params, Covt, ModelConfig};
use covt::nn::Activation;
use covt::params::ParamStore;
use covt::tensor::{Tape, Tensor};
use covt::transformer::{improved_mlp, improved_mlp_with, original_mlp, EncoderConfig, Mlp, MlpMode};
use covt::verify::naive_two_branch_mlp;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Weights {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

fn weights(c: usize, h: usize, r: &mut impl Rng, value: &mut impl FnMut(&mut dyn rand::RngCore) -> f64) -> Weights {
    let mut t = |shape: &[usize]| Tensor::from_fn(shape.to_vec(), |_| value(r));
    Weights { w1: t(&[c, h]), b1: t(&[h]), w2: t(&[h, c]), b2: t(&[c]) }
}

fn generic(r: &mut dyn rand::RngCore) -> f64 {
    r.random_range(-1.0..1.0)
}

/// Multiples of 1/16 in [-1, 1]: every product and sum stays exact.
fn dyadic(r: &mut dyn rand::RngCore) -> f64 {
    r.random_range(-16i32..=16) as f64 / 16.0
}

fn run(x: &Tensor, w: &Weights, act: Activation, improved: bool) -> Tensor {
    let tape = Tape::new();
    let c = |t: &Tensor| tape.constant(t.clone());
    let (fc1, fc2) = ((c(&w.w1), c(&w.b1)), (c(&w.w2), c(&w.b2)));
    let y = if improved { improved_mlp(c(x), fc1, fc2, act) } else { original_mlp(c(x), fc1, fc2, act) };
    y.unwrap().value()
}

#[test]
fn constant_tokens_double_the_original() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for act in [Activation::Gelu, Activation::Relu] {
        let w = weights(6, 12, &mut r, &mut generic);
        let token: Vec<f64> = (0..6).map(|_| r.random_range(-2.0..2.0)).collect();
        let x = Tensor::from_fn([2, 7, 6], |i| token[i % 6]);
        let orig = run(&x, &w, act, false);
        let imp = run(&x, &w, act, true);
        assert_eq!(imp, orig.map(|v| 2.0 * v), "{act:?}");
    }
}

#[test]
fn difference_from_original_is_token_constant() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let w = weights(4, 8, &mut r, &mut dyadic);
    let x = Tensor::from_fn([2, 8, 4], |_| dyadic(&mut r));
    let diff = |x: &Tensor, w: &Weights, act| {
        let (imp, orig) = (run(x, w, act, true), run(x, w, act, false));
        Tensor::new(imp.shape(), imp.data().iter().zip(orig.data()).map(|(a, b)| a - b).collect()).unwrap()
    };
    let d = diff(&x, &w, Activation::Relu);
    for b in 0..2 {
        let first = &d.data()[b * 32..b * 32 + 4];
        for t in 1..8 {
            assert_eq!(&d.data()[b * 32 + t * 4..b * 32 + t * 4 + 4], first, "exact on dyadic inputs");
        }
    }
    // Generic inputs: equal up to the rounding of one addition and subtraction.
    let w = weights(6, 12, &mut r, &mut generic);
    let x = Tensor::from_fn([2, 5, 6], |_| generic(&mut r));
    let d = diff(&x, &w, Activation::Gelu);
    for b in 0..2 {
        for t in 1..5 {
            for k in 0..6 {
                let (a, z) = (d.data()[(b * 5 + t) * 6 + k], d.data()[b * 30 + k]);
                assert!((a - z).abs() <= 1e-14, "{a} vs {z}");
            }
        }
    }
}

#[test]
fn shared_branch_adds_no_parameters() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut count = |mode| {
        let cfg = EncoderConfig { embed_dim: 16, num_heads: 2, mlp_mode: mode, ..EncoderConfig::default() };
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "mlp", &cfg, &mut r).unwrap();
        assert_eq!(mlp.param_count(), store.numel());
        store.numel()
    };
    let original = count(MlpMode::Original);
    assert_eq!(count(MlpMode::Improved), original);
    assert_eq!(count(MlpMode::ImprovedUnshared), 2 * original);
    for preset in ModelConfig::PRESETS {
        let mut cfg = ModelConfig::preset(preset).unwrap();
        let improved = count_params(&cfg);
        cfg.encoder.mlp_mode = MlpMode::Original;
        assert_eq!(improved, count_params(&cfg), "{preset}");
    }
    let m = Covt::new(ModelConfig::micro(), 0).unwrap();
    assert_eq!(m.params.numel(), m.with_mlp_mode(MlpMode::Original, 0).unwrap().params.numel());
}

#[test]
fn permutation_equivariant() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let w = weights(6, 12, &mut r, &mut generic);
    let x = Tensor::from_fn([2, 9, 6], |_| generic(&mut r));
    let mut perm: Vec<usize> = (0..9).collect();
    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
    let permute = |t: &Tensor| {
        Tensor::from_fn([2, 9, 6], |i| {
            let (b, n, k) = (i / 54, (i / 6) % 9, i % 6);
            t.data()[(b * 9 + perm[n]) * 6 + k]
        })
    };
    for act in [Activation::Gelu, Activation::Relu] {
        assert_eq!(run(&permute(&x), &w, act, true), permute(&run(&x, &w, act, true)), "{act:?}");
    }
}

#[test]
fn matches_loop_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let w = weights(5, 7, &mut r, &mut generic);
    let g = weights(5, 7, &mut r, &mut generic);
    let x = Tensor::from_fn([3, 4, 5], |_| generic(&mut r));
    for act in [Activation::Gelu, Activation::Relu] {
        let shared = naive_two_branch_mlp(&x, (&w.w1, &w.b1), (&w.w2, &w.b2), ((&w.w1, &w.b1), (&w.w2, &w.b2)), act);
        assert!(run(&x, &w, act, true).max_abs_diff(&shared) < 1e-12);

        let tape = Tape::new();
        let c = |t: &Tensor| tape.constant(t.clone());
        let y = improved_mlp_with(
            c(&x),
            (c(&w.w1), c(&w.b1)),
            (c(&w.w2), c(&w.b2)),
            (c(&g.w1), c(&g.b1)),
            (c(&g.w2), c(&g.b2)),
            act,
        )
        .unwrap()
        .value();
        let want = naive_two_branch_mlp(&x, (&w.w1, &w.b1), (&w.w2, &w.b2), ((&g.w1, &g.b1), (&g.w2, &g.b2)), act);
        assert!(y.max_abs_diff(&want) < 1e-12);
    }
}
