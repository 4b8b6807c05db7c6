use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use covt::data::{load_image_dir, split, synth_dataset, write_image_dir, Dataset, Normalization, SynthConfig};
use covt::model::{count_flops, count_params, Checkpoint, Covt, ModelConfig};
use covt::train::{evaluate, Trainer};
use covt::verify::{receptive_field_probe, run_suite};
use covt::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;
use crate::RunFlags;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const FINAL_CHECKPOINT: &str = "checkpoint.bin";

fn resolve_run(flags: &RunFlags) -> Result<RunConfig> {
    let mut cfg = match (&flags.config, &flags.preset) {
        (Some(_), Some(_)) => return Err(Error::Config("--config and --preset are mutually exclusive".into())),
        (Some(path), None) => RunConfig::load(path)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = flags.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = &flags.variant {
        cfg.model.variant = v.clone();
    }
    if let Some(v) = &flags.data {
        cfg.data.train = Some(v.clone());
    }
    if let Some(v) = &flags.val_data {
        cfg.data.val = Some(v.clone());
    }
    if let Some(v) = &flags.out {
        cfg.out = v.clone();
    }
    if flags.mixup {
        cfg.mixup.enabled = Some(true);
    }
    if flags.no_mixup {
        cfg.mixup.enabled = Some(false);
    }
    if let Some(v) = flags.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    cfg.resolved()
}

fn load_dir(path: &Path, model: &ModelConfig, norm: &Normalization) -> Result<Dataset> {
    let (ds, report) = load_image_dir(path, model.image_size, norm)?;
    if report.skipped > 0 {
        log::warn!("{}: skipped {} unreadable files", path.display(), report.skipped);
    }
    if ds.num_classes() != model.num_classes {
        return Err(Error::Config(format!(
            "{} has {} classes but the model is configured for {}; set model.num_classes",
            path.display(),
            ds.num_classes(),
            model.num_classes
        )));
    }
    Ok(ds)
}

fn synthetic(model: &ModelConfig, per_class: usize, noise: f64, seed: u64) -> Result<Dataset> {
    synth_dataset(&SynthConfig {
        n_per_class: per_class,
        classes: model.num_classes,
        image_size: model.image_size,
        noise,
        seed,
    })
}

fn datasets(cfg: &RunConfig, model: &ModelConfig) -> Result<(Dataset, Option<Dataset>)> {
    let norm = cfg.data.normalization.unwrap_or_default();
    let full = match &cfg.data.train {
        Some(dir) => load_dir(dir, model, &norm)?,
        None => {
            synthetic(model, cfg.data.synth_per_class.unwrap_or(16), cfg.data.synth_noise.unwrap_or(0.1), cfg.seed)?
        }
    };
    if let Some(dir) = &cfg.data.val {
        return Ok((full, Some(load_dir(dir, model, &norm)?)));
    }
    let f = cfg.data.val_fraction;
    if f > 0.0 {
        let (train, val) = split(&full, &[1.0 - f, f], cfg.seed)?;
        return Ok((train, Some(val)));
    }
    Ok((full, None))
}

fn create(path: &Path, append: bool) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

fn write_line(file: &mut File, path: &Path, line: &str) -> Result<()> {
    writeln!(file, "{line}").and_then(|_| file.flush()).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct TrainSummary {
    out: PathBuf,
    checkpoint: PathBuf,
    epochs: usize,
    steps: usize,
    final_metrics: Option<serde_json::Value>,
}

pub fn train(flags: &RunFlags, resume: Option<&Path>, json: bool) -> Result<ExitCode> {
    let cfg = resolve_run(flags)?;
    let model_cfg = cfg.model.resolve()?;
    let (train_set, val_set) = datasets(&cfg, &model_cfg)?;
    let train_cfg = cfg.train_config(&model_cfg);

    let (mut model, mut trainer) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config != model_cfg {
                return Err(Error::Checkpoint(format!("{}: model config differs from this run's", path.display())));
            }
            let model = ck.to_model()?;
            let trainer = Trainer::resume(train_cfg, &model, train_set.len(), &ck)?;
            (model, trainer)
        }
        None => {
            let model = Covt::new(model_cfg, cfg.seed)?;
            let trainer = Trainer::new(train_cfg, &model, train_set.len())?;
            (model, trainer)
        }
    };

    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let config_path = cfg.out.join(CONFIG_FILE);
    std::fs::write(&config_path, cfg.to_toml()).map_err(|e| Error::io(&config_path, e))?;
    let (metrics_path, timing_path) = (cfg.out.join(METRICS_FILE), cfg.out.join(TIMING_FILE));
    let mut metrics = create(&metrics_path, resume.is_some())?;
    let mut timing = create(&timing_path, resume.is_some())?;

    let mut last = None;
    trainer.run(&mut model, &train_set, val_set.as_ref(), |t, m, epoch| {
        let line = epoch.json_line();
        write_line(&mut metrics, &metrics_path, &line)?;
        write_line(&mut timing, &timing_path, &format!("{{\"epoch\":{},\"wall_ms\":{}}}", epoch.epoch, epoch.wall_ms))?;
        if cfg.checkpoint_every > 0 && epoch.epoch % cfg.checkpoint_every == 0 {
            t.checkpoint(m).save(cfg.out.join(format!("checkpoint-epoch{:04}.bin", epoch.epoch)))?;
        }
        if !json {
            println!("{line}");
        }
        last = Some(serde_json::to_value(epoch).expect("metrics serialize"));
        Ok(())
    })?;
    let checkpoint = cfg.out.join(FINAL_CHECKPOINT);
    trainer.checkpoint(&model).save(&checkpoint)?;
    if json {
        let summary = TrainSummary {
            out: cfg.out.clone(),
            checkpoint,
            epochs: trainer.state.epoch,
            steps: trainer.state.step,
            final_metrics: last,
        };
        println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn eval(checkpoint: &Path, data: Option<&Path>, seed: u64, json: bool) -> Result<ExitCode> {
    let model = Checkpoint::load(checkpoint)?.to_model()?;
    let ds = match data {
        Some(dir) => load_dir(dir, &model.config, &Normalization::default())?,
        None => synthetic(&model.config, 16, 0.1, seed)?,
    };
    let report = evaluate(&model, &ds)?;
    let text = if json { serde_json::to_string(&report) } else { serde_json::to_string_pretty(&report) };
    println!("{}", text.expect("report serializes"));
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(op: Option<&str>, json: bool) -> Result<ExitCode> {
    let reports = run_suite(op)?;
    if reports.is_empty() {
        return Err(Error::Config(format!("no gradcheck case matches {:?}", op.unwrap_or(""))));
    }
    let passed = reports.iter().all(|r| r.passed);
    if json {
        println!("{}", serde_json::to_string(&reports).expect("reports serialize"));
    } else {
        println!("{:<24} {:>4} {:>12} {:>9}  result", "op", "seed", "max rel err", "tol");
        for r in &reports {
            let verdict = if r.passed { "pass" } else { "FAIL" };
            println!("{:<24} {:>4} {:>12.3e} {:>9.0e}  {verdict}", r.op, r.seed, r.max_rel_err(), r.tolerance);
        }
        let failed = reports.iter().filter(|r| !r.passed).count();
        println!("{} instances, {failed} failed", reports.len());
    }
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

#[derive(Serialize)]
struct FieldRow {
    rate: usize,
    height: usize,
    width: usize,
    probe_height: Option<usize>,
    probe_width: Option<usize>,
}

#[derive(Serialize)]
struct Inspection {
    variant: String,
    image_size: (usize, usize),
    stem_stride: usize,
    params: usize,
    macs: u64,
    tokens: usize,
    receptive_fields: Vec<FieldRow>,
    probe_agrees: Option<bool>,
}

pub fn inspect(
    flags: &RunFlags,
    checkpoint: Option<&Path>,
    stem_stride: Option<usize>,
    probe: bool,
    json: bool,
) -> Result<ExitCode> {
    let mut model = match checkpoint {
        Some(path) => Checkpoint::load(path)?.config,
        None => resolve_run(flags)?.model.resolve()?,
    };
    if let Some(s) = stem_stride {
        model.stem.stem_stride = s;
        model.validate()?;
    }
    let analytic = model.stem.receptive_fields();
    let probed = if probe {
        let widest = analytic.iter().map(|f| f.height.max(f.width)).max().unwrap_or(1);
        let s = model.stem.stem_stride;
        let image = (2 * widest + 2).div_ceil(s) * s;
        Some(receptive_field_probe(&model.stem, image, 0)?)
    } else {
        None
    };
    let rows: Vec<FieldRow> = analytic
        .iter()
        .enumerate()
        .map(|(i, f)| FieldRow {
            rate: f.rate,
            height: f.height,
            width: f.width,
            probe_height: probed.as_ref().map(|p| p[i].height),
            probe_width: probed.as_ref().map(|p| p[i].width),
        })
        .collect();
    let info = Inspection {
        variant: model.variant.clone(),
        image_size: model.image_size,
        stem_stride: model.stem.stem_stride,
        params: count_params(&model),
        macs: count_flops(&model),
        tokens: model.num_tokens()?,
        probe_agrees: probed.as_ref().map(|p| *p == analytic),
        receptive_fields: rows,
    };
    if json {
        println!("{}", serde_json::to_string(&info).expect("inspection serializes"));
    } else {
        println!(
            "variant {}  image {}x{}  stem stride {}",
            info.variant, info.image_size.0, info.image_size.1, info.stem_stride
        );
        println!("params {}  MACs {}  tokens {}", info.params, info.macs, info.tokens);
        println!("{:>5} {:>10} {:>10}", "rate", "field", "probe");
        for r in &info.receptive_fields {
            let probe = match (r.probe_height, r.probe_width) {
                (Some(h), Some(w)) => format!("{h}x{w}"),
                _ => "-".into(),
            };
            println!("{:>5} {:>10} {:>10}", r.rate, format!("{}x{}", r.height, r.width), probe);
        }
    }
    if info.probe_agrees == Some(false) {
        eprintln!("error: probed receptive fields disagree with the analytic table");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

pub fn synth(out: &Path, n_per_class: usize, classes: usize, size: usize, noise: f64, seed: u64) -> Result<ExitCode> {
    let ds = synth_dataset(&SynthConfig { n_per_class, classes, image_size: (size, size), noise, seed })?;
    write_image_dir(&ds, out, &Normalization::default())?;
    println!("wrote {} images in {} classes to {}", ds.len(), classes, out.display());
    Ok(ExitCode::SUCCESS)
}
