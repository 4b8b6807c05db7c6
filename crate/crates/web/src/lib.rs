//! Browser bindings: receptive-field probe, atrous branch maps, LR curve.

use covt::data::{synth_dataset, SynthConfig};
use covt::nn::Forward;
use covt::params::ParamStore;
use covt::stem::{CnnStem, StemConfig};
use covt::train::{cosine_lr, ScheduleConfig};
use covt::{Result, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn demo_stem(stride: usize) -> StemConfig {
    StemConfig { stem_channels: 8, stem_stride: stride, branch_channels: 4, ..StemConfig::default() }
}

fn build(config: &StemConfig, seed: u64) -> Result<(ParamStore, CnnStem)> {
    let mut store = ParamStore::new();
    let stem = CnnStem::new(&mut store, config.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok((store, stem))
}

/// Smallest square probe image whose fields stay clear of the border.
pub fn probe_size(stride: usize) -> usize {
    let widest = demo_stem(stride).receptive_fields().iter().map(|f| f.height).max().unwrap_or(1);
    (2 * widest + 2).div_ceil(stride) * stride
}

/// `|d out / d input|` for the centre pixel of `branch`, summed over input
/// channels and scaled to [0, 1]; row-major `probe_size(stride)` squared.
pub fn field_map(stride: usize, branch: usize) -> Result<Vec<f64>> {
    let config = demo_stem(stride);
    let (mut store, stem) = build(&config, 0)?;
    for (_, t) in store.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = v.abs() + 1e-3);
    }
    let n = probe_size(stride);
    let (oh, ow) = config.output_grid(n, n)?;
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let f = Forward::eval(&tape, &bound);
    let x = tape.leaf(Tensor::ones([1, 3, n, n]));
    let outs = stem.forward_branches(&f, x)?;
    let out = outs.get(branch).ok_or_else(|| covt::Error::Invalid(format!("no branch {branch}")))?;
    let picked = out.slice(1, 0, 1)?.slice(2, oh / 2, oh / 2 + 1)?.slice(3, ow / 2, ow / 2 + 1)?;
    tape.backward(picked.sum())?;
    let grad = x.grad().expect("input requires grad");
    let mut map = vec![0.0; n * n];
    for (i, g) in grad.data().iter().enumerate() {
        map[i % (n * n)] += g.abs();
    }
    Ok(scaled(map))
}

/// Min-max rescale to [0, 1]; a flat map becomes all zeros.
fn scaled(mut v: Vec<f64>) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    v.iter_mut().for_each(|x| *x = (*x - lo) / span);
    v
}

/// Input grating of `class` followed by channel 0 of each branch, every
/// map scaled to [0, 1]. Input is `size` squared, each branch map is the
/// stem grid squared.
pub fn feature_maps(class: usize, classes: usize, size: usize, stride: usize, seed: u64) -> Result<Vec<f64>> {
    let ds = synth_dataset(&SynthConfig { n_per_class: 1, classes, image_size: (size, size), noise: 0.05, seed })?;
    let sample = ds.items.get(class).ok_or_else(|| covt::Error::Invalid(format!("no class {class}")))?;
    let (store, stem) = build(&demo_stem(stride), seed)?;
    let tape = Tape::new();
    let bound = store.bind(&tape);
    let f = Forward::eval(&tape, &bound);
    let img = &sample.image;
    let x = tape.constant(img.reshape([1, 3, size, size])?);
    let mut out = scaled(img.data()[..size * size].to_vec());
    for b in stem.forward_branches(&f, x)? {
        let v = b.value();
        let g = v.shape()[2] * v.shape()[3];
        out.extend(scaled(v.data()[..g].to_vec()));
    }
    Ok(out)
}

/// Learning rate at `points` evenly spaced steps from 0 to `total`.
pub fn lr_curve(lr_start: f64, lr_end: f64, total: usize, warmup: usize, points: usize) -> Result<Vec<f64>> {
    let cfg = ScheduleConfig { lr_start, lr_end, total_steps: total, warmup_steps: warmup };
    let last = points.max(2) - 1;
    (0..=last).map(|i| cosine_lr(i * total / last, &cfg)).collect()
}

fn js<T>(r: Result<T>) -> std::result::Result<T, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = probeSize)]
pub fn probe_size_js(stride: usize) -> usize {
    probe_size(stride)
}

/// Analytic receptive-field edge per branch.
#[wasm_bindgen(js_name = analyticFields)]
pub fn analytic_fields(stride: usize) -> Vec<u32> {
    demo_stem(stride).receptive_fields().iter().map(|f| f.height as u32).collect()
}

#[wasm_bindgen(js_name = fieldMap)]
pub fn field_map_js(stride: usize, branch: usize) -> std::result::Result<Vec<f64>, JsError> {
    js(field_map(stride, branch))
}

#[wasm_bindgen(js_name = featureMaps)]
pub fn feature_maps_js(
    class: usize,
    classes: usize,
    size: usize,
    stride: usize,
    seed: u32,
) -> std::result::Result<Vec<f64>, JsError> {
    js(feature_maps(class, classes, size, stride, seed as u64))
}

#[wasm_bindgen(js_name = lrCurve)]
pub fn lr_curve_js(
    lr_start: f64,
    lr_end: f64,
    total: usize,
    warmup: usize,
    points: usize,
) -> std::result::Result<Vec<f64>, JsError> {
    js(lr_curve(lr_start, lr_end, total, warmup, points))
}
