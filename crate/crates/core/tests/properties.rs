use covt::data::{split, synth_dataset, Normalization, SynthConfig};
use covt::nn::conv2d;
use covt::tensor::{Tape, Tensor};
use covt::train::{cosine_lr, ScheduleConfig};
use covt::verify::{naive_conv2d, random_conv_instance};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalization_is_invertible(vals in prop::collection::vec(-5.0f64..5.0, 12), m in 0.0f64..1.0, s in 0.05f64..3.0) {
        let norm = Normalization { mean: [m, 0.5, 1.0 - m], std: [s, 1.0, 2.0 * s] };
        let x = Tensor::new([3, 2, 2], vals).unwrap();
        let mut y = x.clone();
        norm.normalize(&mut y);
        norm.denormalize(&mut y);
        prop_assert!(y.max_abs_diff(&x) <= 1e-12);
    }

    #[test]
    fn split_partitions(n in 2usize..12, seed in any::<u64>(), train_frac in 0.5f64..0.9) {
        let ds = synth_dataset(&SynthConfig { n_per_class: n, image_size: (4, 4), seed, ..Default::default() }).unwrap();
        if let Ok((train, val)) = split(&ds, &[train_frac, 1.0 - train_frac], seed) {
            prop_assert_eq!(train.len() + val.len(), ds.len());
            for s in &ds.items {
                let a = train.items.iter().filter(|t| *t == s).count();
                let b = val.items.iter().filter(|t| *t == s).count();
                prop_assert_eq!(a + b, ds.items.iter().filter(|t| *t == s).count());
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let tape = Tape::new();
        let p = tape.constant(Tensor::new([3, 4], vals).unwrap()).softmax(1).unwrap().value();
        for row in p.data().chunks(4) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_is_monotone(total in 1usize..5000, a in 0usize..5000, b in 0usize..5000) {
        let cfg = ScheduleConfig { total_steps: total, ..Default::default() };
        let (lo, hi) = (a.min(b).min(total), a.max(b).min(total));
        prop_assert!(cosine_lr(lo, &cfg).unwrap() >= cosine_lr(hi, &cfg).unwrap());
    }

    #[test]
    fn conv_matches_oracle(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (spec, xs) = random_conv_instance(&mut r);
        let x = Tensor::from_fn(xs.to_vec(), |_| r.random_range(-1.0..1.0));
        let w = Tensor::from_fn(spec.weight_shape().to_vec(), |_| r.random_range(-1.0..1.0));
        let b = Tensor::from_fn([spec.out_channels], |_| r.random_range(-1.0..1.0));
        let tape = Tape::new();
        let got = conv2d(tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()), &spec).unwrap().value();
        prop_assert!(got.max_abs_diff(&naive_conv2d(&x, &w, &b, &spec).unwrap()) <= 1e-12);
    }
}
