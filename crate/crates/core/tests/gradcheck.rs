use std::collections::BTreeSet;

use covt::model::{Covt, ModelConfig};
use covt::nn::Forward;
use covt::tensor::{Tape, Tensor, OP_KINDS};
use covt::verify::*;

#[test]
fn finite_diff_examples() {
    let x = Tensor::new([2], vec![1.0, 2.0]).unwrap();
    let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
    assert!((g.data()[0] - 2.0).abs() < 1e-8 && (g.data()[1] - 4.0).abs() < 1e-8);
    let g = finite_diff_grad(|_| Ok(3.0), &x, 1e-5).unwrap();
    assert!(g.data().iter().all(|&v| v == 0.0));
    assert!(finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-5).is_err());
    assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
}

#[test]
fn relative_error_floor() {
    assert_eq!(rel_error(0.0, 0.0), 0.0);
    assert!((rel_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
    assert_eq!(rel_error(2.0, 1.0), 0.5);
}

#[test]
fn full_suite_passes() {
    let reports = run_suite(None).unwrap();
    let failing: Vec<_> = reports.iter().filter(|r| !r.passed).collect();
    assert!(failing.is_empty(), "{failing:#?}");
    for r in &reports {
        let expected = if r.op.starts_with("model") { END_TO_END_TOLERANCE } else { OP_TOLERANCE };
        assert_eq!(r.tolerance, expected, "{}", r.op);
    }
    let ops: Vec<_> = reports.iter().map(|r| (r.op.clone(), r.seed)).collect();
    let mut sorted = ops.clone();
    sorted.sort();
    assert_eq!(ops, sorted);
}

#[test]
fn every_op_kind_has_a_case() {
    let covered: BTreeSet<&str> = grad_cases().iter().flat_map(|c| c.covers.iter().copied()).collect();
    for kind in OP_KINDS.iter().chain(&["conv2d"]) {
        assert!(covered.contains(kind), "no gradcheck case covers {kind}");
    }
    // Everything a real forward pass records must be covered too.
    let model = Covt::new(ModelConfig::micro(), 0).unwrap();
    let tape = Tape::new();
    let b = model.params.bind(&tape);
    let f = Forward::eval(&tape, &b);
    let y = model.forward(&f, tape.constant(Tensor::zeros([1, 3, 32, 32]))).unwrap();
    covt::train::cross_entropy_soft(y, &covt::train::one_hot(&[1], 2)).unwrap();
    for kind in tape.op_kinds() {
        assert!(covered.contains(kind), "model uses uncovered op {kind}");
    }
}

#[test]
fn layer_cases_are_registered() {
    let names: BTreeSet<&str> = grad_cases().iter().map(|c| c.name).collect();
    for layer in [
        "conv2d",
        "linear",
        "attention",
        "layer_norm",
        "original_mlp",
        "improved_mlp",
        "improved_mlp_unshared",
        "tokenize",
        "encoder_block",
        "cnn_stem",
        "dropout",
        "cross_entropy_soft",
        "model",
        "model_micro",
    ] {
        assert!(names.contains(layer), "{layer}");
    }
}

#[test]
fn end_to_end_converges_in_step_size() {
    let model = Covt::new(ModelConfig::tiny(), 4).unwrap();
    let x = Tensor::from_fn([1, 3, 16, 16], |i| (i as f64 * 0.173).sin());
    let names: Vec<String> =
        model.params.iter().map(|(n, _)| n.to_string()).filter(|n| !has_null_gradient(n)).collect();
    let loss = |p: &str, t: &Tensor| -> covt::Result<f64> {
        let mut m = model.clone();
        *m.params.by_name_mut(p).unwrap() = t.clone();
        Ok(m.logits(&x)?.sum())
    };
    let tape = Tape::new();
    let b = model.params.bind(&tape);
    let f = Forward::eval(&tape, &b);
    tape.backward(model.forward(&f, tape.constant(x.clone())).unwrap().sum()).unwrap();
    let grads = b.grads();
    for name in ["head.weight", "blocks.0.mlp.fc1.weight", "stem.branch3.weight", "embed.pos_embed"] {
        let id = model.params.id(name).unwrap();
        let analytic = grads[id.index()].as_ref().unwrap();
        let t = model.params.get(id);
        let coarse = finite_diff_grad(|v| loss(name, v), t, 1e-4).unwrap();
        let fine = finite_diff_grad(|v| loss(name, v), t, 1e-5).unwrap();
        for ((a, c), f) in analytic.iter().zip(coarse.data()).zip(fine.data()) {
            assert!(rel_error(*a, *c) < END_TO_END_TOLERANCE, "{name} h=1e-4");
            assert!(rel_error(*a, *f) < END_TO_END_TOLERANCE, "{name} h=1e-5");
        }
    }
    assert!(names.len() > 20);
}

#[test]
fn key_bias_gradient_vanishes() {
    let model = Covt::new(ModelConfig::tiny(), 1).unwrap();
    let tape = Tape::new();
    let b = model.params.bind(&tape);
    let f = Forward::eval(&tape, &b);
    let x = Tensor::from_fn([2, 3, 16, 16], |i| (i as f64 * 0.31).cos());
    tape.backward(model.forward(&f, tape.constant(x)).unwrap().sum()).unwrap();
    let grads = b.grads();
    let mut seen = 0;
    for (id, (name, _)) in model.params.ids().zip(model.params.iter()) {
        if has_null_gradient(name) {
            seen += 1;
            let g = grads[id.index()].as_ref().unwrap();
            assert!(g.iter().all(|v| v.abs() < 1e-12), "{name}: {g:?}");
        }
    }
    assert_eq!(seen, 1);
}

#[test]
fn sampled_micro_check_passes() {
    let r = micro_model_case(5, 6).unwrap();
    assert!(r.passed, "{r:#?}");
}
