//! Datasets: class-folder image loading, a seeded synthetic generator and
//! stratified splits.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{SeedTree, SHUFFLE, SYNTH};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`, normalized.
    pub image: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    All,
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub items: Vec<Sample>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.items.first().map(|s| s.image.shape())
    }

    /// Stacks the images at `indices` into `[B, 3, H, W]`.
    pub fn batch_images(&self, indices: &[usize]) -> Tensor {
        let shape = self.items[indices[0]].image.shape();
        let mut data = Vec::with_capacity(indices.len() * self.items[indices[0]].image.numel());
        for &i in indices {
            data.extend_from_slice(self.items[i].image.data());
        }
        let mut full = vec![indices.len()];
        full.extend_from_slice(shape);
        Tensor::new(full, data).expect("uniform image shapes")
    }
}

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: [0.5; 3], std: [0.5; 3] }
    }
}

impl Normalization {
    pub fn normalize(&self, image: &mut Tensor) {
        self.apply(image, |v, m, s| (v - m) / s);
    }

    pub fn denormalize(&self, image: &mut Tensor) {
        self.apply(image, |v, m, s| v * s + m);
    }

    fn apply(&self, image: &mut Tensor, f: impl Fn(f64, f64, f64) -> f64) {
        let plane = image.numel() / 3;
        for (i, v) in image.data_mut().iter_mut().enumerate() {
            let c = i / plane;
            *v = f(*v, self.mean[c], self.std[c]);
        }
    }
}

/// Bilinear resample of a `[C, H, W]` tensor with half-pixel centers and
/// edge clamping.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let src = image.data();
    let coord = |o: usize, out: usize, inp: usize| {
        let x = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = x.floor() as usize;
        (lo, (lo + 1).min(inp - 1), x - lo as f64)
    };
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for i in 0..out_h {
            let (y0, y1, fy) = coord(i, out_h, h);
            for j in 0..out_w {
                let (x0, x1, fx) = coord(j, out_w, w);
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new([c, out_h, out_w], out).expect("resize shape")
}

/// Decodes one file into a `[3, H, W]` tensor in `[0, 1]`; grayscale is
/// replicated across the three channels.
pub fn decode_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb16();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (idx, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + idx] = px.0[c] as f64 / 65535.0;
        }
    }
    Ok(Tensor::new([3, h, w], data)?)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Files that had a supported extension but failed to decode.
    pub skipped: usize,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Loads `<root>/<class>/*.{png,ppm,pgm,pnm}`. Classes are subdirectories
/// in alphabetical order; unreadable files are skipped and counted.
pub fn load_image_dir(root: &Path, size: (usize, usize), norm: &Normalization) -> Result<(Dataset, LoadReport)> {
    let classes: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(Error::Data(format!("{}: no class subdirectories", root.display())));
    }
    let mut report = LoadReport::default();
    let mut items = Vec::new();
    let mut class_names = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && is_image(p)).collect();
        if files.is_empty() {
            return Err(Error::Data(format!("class directory {} has no images", dir.display())));
        }
        for file in files {
            match decode_image(&file) {
                Ok(raw) => {
                    let mut image = resize_bilinear(&raw, size.0, size.1);
                    norm.normalize(&mut image);
                    items.push(Sample { image, label });
                }
                Err(e) => {
                    log::warn!("skipping {e}");
                    report.skipped += 1;
                }
            }
        }
        class_names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
    }
    Ok((Dataset { items, class_names, split: Split::All }, report))
}

/// Writes each sample as `<out>/<class>/<index>.png` after undoing `norm`.
pub fn write_image_dir(dataset: &Dataset, out: &Path, norm: &Normalization) -> Result<()> {
    for name in &dataset.class_names {
        let dir = out.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (i, s) in dataset.items.iter().enumerate() {
        let mut img = s.image.clone();
        norm.denormalize(&mut img);
        let (h, w) = (img.shape()[1], img.shape()[2]);
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for (idx, px) in buf.pixels_mut().enumerate() {
            for c in 0..3 {
                px.0[c] = (img.data()[c * h * w + idx].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        let path = out.join(&dataset.class_names[s.label]).join(format!("{i:05}.png"));
        buf.save(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub classes: usize,
    pub image_size: (usize, usize),
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { n_per_class: 16, classes: 2, image_size: (32, 32), noise: 0.1, seed: 0 }
    }
}

/// Class `k` is a grating with its own orientation, frequency and mean
/// brightness, plus seeded Gaussian noise; items are grouped by class.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(Error::Data(format!("synthetic data needs at least 2 classes, got {}", cfg.classes)));
    }
    let (h, w) = cfg.image_size;
    if h == 0 || w == 0 || cfg.n_per_class == 0 {
        return Err(Error::Data("synthetic data needs positive sizes".into()));
    }
    let mut rng = SeedTree::new(cfg.seed).stream(SYNTH);
    let norm = Normalization::default();
    let k_max = (cfg.classes - 1) as f64;
    let mut items = Vec::with_capacity(cfg.classes * cfg.n_per_class);
    for k in 0..cfg.classes {
        let theta = std::f64::consts::PI * k as f64 / cfg.classes as f64;
        let freq = 2.0 + k as f64;
        let base = 0.3 + 0.4 * k as f64 / k_max;
        for _ in 0..cfg.n_per_class {
            let mut image = Tensor::from_fn([3, h, w], |idx| {
                let (c, y, x) = (idx / (h * w), (idx / w) % h, idx % w);
                let u = (x as f64 * theta.cos() + y as f64 * theta.sin()) / w as f64;
                let phase = std::f64::consts::TAU * freq * u + c as f64 * std::f64::consts::FRAC_PI_3;
                let noise: f64 = if cfg.noise > 0.0 {
                    cfg.noise * Distribution::<f64>::sample(&StandardNormal, &mut rng)
                } else {
                    0.0
                };
                (base + 0.2 * phase.sin() + noise).clamp(0.0, 1.0)
            });
            norm.normalize(&mut image);
            items.push(Sample { image, label: k });
        }
    }
    Ok(Dataset { items, class_names: (0..cfg.classes).map(|k| format!("class{k}")).collect(), split: Split::All })
}

/// Stratified seeded split. `fractions` holds the train fraction and,
/// optionally, the validation fraction; they must be positive and sum to at
/// most 1. When they sum to 1 every item lands in exactly one side.
pub fn split(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<(Dataset, Dataset)> {
    let (f_train, f_val) = match fractions {
        [t] => (*t, 0.0),
        [t, v] => (*t, *v),
        _ => return Err(Error::Data(format!("expected 1 or 2 split fractions, got {fractions:?}"))),
    };
    if f_train <= 0.0 || f_val < 0.0 || (fractions.len() == 2 && f_val == 0.0) || f_train + f_val > 1.0 + 1e-12 {
        return Err(Error::Data(format!("invalid split fractions {fractions:?}")));
    }
    let complete = (f_train + f_val - 1.0).abs() < 1e-12;
    let mut rng = SeedTree::new(seed).indexed(SHUFFLE, u64::MAX);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for label in 0..dataset.num_classes() {
        let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.items[i].label == label).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_train = (n as f64 * f_train + 1e-9).floor() as usize;
        let n_val = if complete { n - n_train } else { (n as f64 * f_val + 1e-9).floor() as usize };
        if n_train == 0 || (f_val > 0.0 && n_val == 0) {
            return Err(Error::Data(format!(
                "class {} has {n} items, too few for split {fractions:?}",
                dataset.class_names[label]
            )));
        }
        train.extend(idx[..n_train].iter().map(|&i| dataset.items[i].clone()));
        val.extend(idx[n_train..n_train + n_val].iter().map(|&i| dataset.items[i].clone()));
    }
    let make = |items, split| Dataset { items, class_names: dataset.class_names.clone(), split };
    Ok((make(train, Split::Train), make(val, Split::Val)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_and_noise_free_classes_are_constant() {
        let cfg = SynthConfig { n_per_class: 3, ..Default::default() };
        assert_eq!(synth_dataset(&cfg).unwrap(), synth_dataset(&cfg).unwrap());
        let clean = synth_dataset(&SynthConfig { noise: 0.0, ..cfg.clone() }).unwrap();
        assert_eq!(clean.items[0].image, clean.items[2].image);
        assert_ne!(clean.items[0].image, clean.items[3].image);
        assert!(synth_dataset(&SynthConfig { classes: 1, ..cfg }).is_err());
    }

    #[test]
    fn split_cases() {
        let ds = synth_dataset(&SynthConfig { n_per_class: 10, ..Default::default() }).unwrap();
        let (train, val) = split(&ds, &[1.0], 1).unwrap();
        assert_eq!(train.len(), 20);
        assert!(val.is_empty());
        let (train, val) = split(&ds, &[0.8, 0.2], 1).unwrap();
        for k in 0..2 {
            assert_eq!(train.items.iter().filter(|s| s.label == k).count(), 8);
            assert_eq!(val.items.iter().filter(|s| s.label == k).count(), 2);
        }
        assert_eq!(split(&ds, &[0.8, 0.2], 1).unwrap().1, val);
        let tiny = synth_dataset(&SynthConfig { n_per_class: 1, ..Default::default() }).unwrap();
        assert!(split(&tiny, &[0.5, 0.5], 0).is_err());
        assert!(split(&ds, &[0.9, 0.3], 0).is_err());
    }

    #[test]
    fn normalization_inverts() {
        let norm = Normalization { mean: [0.1, 0.2, 0.3], std: [0.7, 0.3, 1.9] };
        let x = Tensor::from_fn([3, 4, 4], |i| (i as f64 * 0.13).sin());
        let mut y = x.clone();
        norm.normalize(&mut y);
        norm.denormalize(&mut y);
        assert!(y.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn resize_keeps_constants_and_identity() {
        let flat = Tensor::full([3, 5, 7], 0.25);
        assert!(resize_bilinear(&flat, 8, 3).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let x = Tensor::from_fn([3, 4, 4], |i| i as f64);
        assert_eq!(resize_bilinear(&x, 4, 4), x);
        let up = resize_bilinear(&Tensor::new([1, 1, 2], vec![0.0, 1.0]).unwrap(), 1, 4);
        assert_eq!(up.data(), &[0.0, 0.25, 0.75, 1.0]);
    }
}
