use std::time::Instant;

use covt::nn::{conv2d, Conv2dSpec};
use covt::tensor::{Tape, Tensor};
use covt::verify::{naive_conv2d, random_conv_instance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn production(x: &Tensor, w: &Tensor, b: &Tensor, spec: &Conv2dSpec) -> Tensor {
    let tape = Tape::new();
    conv2d(tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()), spec).unwrap().value()
}

#[test]
fn two_hundred_random_instances_match() {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..200 {
        let (spec, xs) = random_conv_instance(&mut r);
        let x = Tensor::from_fn(xs.to_vec(), |_| r.random_range(-1.0..1.0));
        let w = Tensor::from_fn(spec.weight_shape().to_vec(), |_| r.random_range(-1.0..1.0));
        let b = Tensor::from_fn([spec.out_channels], |_| r.random_range(-1.0..1.0));
        let want = naive_conv2d(&x, &w, &b, &spec).unwrap();
        let got = production(&x, &w, &b, &spec);
        assert_eq!(got.shape(), want.shape(), "{spec:?}");
        assert!(got.max_abs_diff(&want) <= 1e-12, "{spec:?}");
        seen.insert((spec.kernel.0, spec.stride.0, spec.dilation.0));
    }
    assert_eq!(seen.len(), 24, "every (k, s, d) combination drawn");
    assert!(start.elapsed().as_secs() < 120);
}

#[test]
fn identity_kernel() {
    let spec = Conv2dSpec::new(1, 1, 3).padding(1);
    let x = Tensor::from_fn([1, 1, 5, 6], |i| i as f64 * 0.5 - 3.0);
    let mut w = Tensor::zeros([1, 1, 3, 3]);
    w.data_mut()[4] = 1.0;
    let y = naive_conv2d(&x, &w, &Tensor::zeros([1]), &spec).unwrap();
    assert_eq!(y, x);
    assert_eq!(production(&x, &w, &Tensor::zeros([1]), &spec), x);
}

#[test]
fn single_tap() {
    let spec = Conv2dSpec::new(1, 1, 1);
    let x = Tensor::new([1, 1, 1, 1], vec![3.0]).unwrap();
    let w = Tensor::new([1, 1, 1, 1], vec![-2.5]).unwrap();
    let y = naive_conv2d(&x, &w, &Tensor::zeros([1]), &spec).unwrap();
    assert_eq!(y.data(), &[-7.5]);
}

#[test]
fn oracle_rejects_what_production_rejects() {
    let spec = Conv2dSpec::new(1, 1, 7).dilation(4);
    let x = Tensor::zeros([1, 1, 5, 5]);
    let w = Tensor::zeros([1, 1, 7, 7]);
    assert!(naive_conv2d(&x, &w, &Tensor::zeros([1]), &spec).is_err());
    let tape = Tape::new();
    assert!(
        conv2d(tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(Tensor::zeros([1])), &spec).is_err()
    );
    assert!(naive_conv2d(&x, &Tensor::zeros([1, 2, 7, 7]), &Tensor::zeros([1]), &spec).is_err());
}
