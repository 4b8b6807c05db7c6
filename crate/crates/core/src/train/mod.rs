//! Training recipe: SGD with momentum, per-step cosine decay, mixup with
//! soft-label cross-entropy, and top-k evaluation.

mod loss;
mod metrics;
mod mixup;
mod optim;
mod schedule;

pub use loss::{cross_entropy, cross_entropy_soft};
pub use metrics::{evaluate, predict, ranking, score_logits, EvalReport};
pub use mixup::{mixup_batch, one_hot, MixupConfig};
pub use optim::{sgd_step, OptimizerState, SgdConfig};
pub use schedule::{cosine_lr, ScheduleConfig};

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::model::{Checkpoint, Covt, TrainState};
use crate::nn::Forward;
use crate::params::GradSet;
use crate::rng::{SeedTree, DROPOUT, MIXUP, SHUFFLE};
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    pub sgd: SgdConfig,
    pub mixup: MixupConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            lr_start: 0.1,
            lr_end: 1e-5,
            warmup_steps: 0,
            sgd: SgdConfig::default(),
            mixup: MixupConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn schedule(&self, n: usize) -> ScheduleConfig {
        ScheduleConfig {
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            total_steps: self.epochs * self.steps_per_epoch(n),
            warmup_steps: self.warmup_steps,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if n == 0 {
            return Err(Error::Data("training set is empty".into()));
        }
        self.mixup.validate()?;
        self.schedule(n).validate()
    }
}

/// One line of the metrics log. Wall time is kept out of the serialized
/// form so logs from identical runs compare byte-for-byte.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr_last: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_top1: Option<f64>,
    pub val_top5: Option<f64>,
    #[serde(skip)]
    pub wall_ms: u128,
}

impl EpochMetrics {
    pub fn json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    pub state: TrainState,
    schedule: ScheduleConfig,
    seeds: SeedTree,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: &Covt, train_len: usize) -> Result<Self> {
        config.validate(train_len)?;
        let schedule = config.schedule(train_len);
        Ok(Trainer {
            optimizer: OptimizerState::new(config.sgd, &model.params),
            state: TrainState { epoch: 0, step: 0, seed: config.seed, total_steps: schedule.total_steps },
            seeds: SeedTree::new(config.seed),
            schedule,
            config,
        })
    }

    /// Continues the run saved in `ckpt`, whose weights must already be
    /// loaded into `model`.
    pub fn resume(config: TrainConfig, model: &Covt, train_len: usize, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(config, model, train_len)?;
        let s = &ckpt.state;
        if s.seed != t.config.seed || s.total_steps != t.state.total_steps || s.epoch > t.config.epochs {
            return Err(Error::Checkpoint(format!(
                "cannot resume: checkpoint has seed {} total_steps {} epoch {}, run has seed {} total_steps {} epochs {}",
                s.seed, s.total_steps, s.epoch, t.config.seed, t.state.total_steps, t.config.epochs
            )));
        }
        t.optimizer.load_velocity(&model.params, &ckpt.velocity)?;
        t.state = s.clone();
        Ok(t)
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.config.epochs
    }

    pub fn checkpoint(&self, model: &Covt) -> Checkpoint {
        Checkpoint::from_model(model, self.state.clone(), self.optimizer.named_velocity(&model.params))
    }

    /// Loss and gradients of one mixed batch; samples are differentiated
    /// independently and summed in index order, so the result does not
    /// depend on the worker count.
    fn batch_grads(&self, model: &Covt, images: &Tensor, targets: &Tensor) -> Result<(f64, GradSet)> {
        let b = images.shape()[0];
        let per_image = images.numel() / b;
        let k = targets.shape()[1];
        let mut sample_shape = images.shape().to_vec();
        sample_shape[0] = 1;
        let step = self.state.step as u64;
        let run = |i: usize| -> Result<(f64, GradSet)> {
            let x = Tensor::new(sample_shape.clone(), images.data()[i * per_image..(i + 1) * per_image].to_vec())?;
            let y = Tensor::new([1, k], targets.data()[i * k..(i + 1) * k].to_vec())?;
            let tape = Tape::new();
            let bound = model.params.bind(&tape);
            let rng = self.seeds.indexed(DROPOUT, step.wrapping_mul(1 << 20).wrapping_add(i as u64));
            let f = Forward::train(&tape, &bound, rng);
            let logits = model.forward(&f, tape.constant(x))?;
            let loss = cross_entropy_soft(logits, &y)?.scale(1.0 / b as f64);
            tape.backward(loss)?;
            Ok((loss.value().item(), bound.grads()))
        };
        // Samples run in worker-sized chunks so only a few detached
        // gradient sets are alive at once; the sum order is always 0..b.
        #[cfg(feature = "parallel")]
        let chunk = rayon::current_num_threads().max(1);
        #[cfg(not(feature = "parallel"))]
        let chunk = 1;
        let mut loss = 0.0;
        let mut total: GradSet = vec![None; model.params.len()];
        for start in (0..b).step_by(chunk) {
            let range = start..(start + chunk).min(b);
            #[cfg(feature = "parallel")]
            let parts: Vec<(f64, GradSet)> = {
                use rayon::prelude::*;
                range.into_par_iter().map(run).collect::<Result<_>>()?
            };
            #[cfg(not(feature = "parallel"))]
            let parts: Vec<(f64, GradSet)> = range.map(run).collect::<Result<_>>()?;
            for (l, grads) in parts {
                loss += l;
                for (slot, g) in total.iter_mut().zip(grads) {
                    let Some(g) = g else { continue };
                    match slot {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok((loss, total))
    }

    fn mixed_batch(&self, train: &Dataset, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let images = train.batch_images(idx);
        let labels: Vec<usize> = idx.iter().map(|&i| train.items[i].label).collect();
        let targets = one_hot(&labels, train.num_classes());
        if !self.config.mixup.enabled {
            return Ok((images, targets));
        }
        let mut rng = self.seeds.indexed(MIXUP, self.state.step as u64);
        let lambda = self.config.mixup.sample_lambda(&mut rng)?;
        let mut partner: Vec<usize> = (0..idx.len()).collect();
        partner.shuffle(&mut rng);
        let p_images = train.batch_images(&partner.iter().map(|&j| idx[j]).collect::<Vec<_>>());
        let p_labels: Vec<usize> = partner.iter().map(|&j| labels[j]).collect();
        mixup_batch(&images, &p_images, &targets, &one_hot(&p_labels, train.num_classes()), lambda)
    }

    /// Runs the next epoch and returns its metrics.
    pub fn run_epoch(&mut self, model: &mut Covt, train: &Dataset, val: Option<&Dataset>) -> Result<EpochMetrics> {
        if train.num_classes() != model.config.num_classes {
            return Err(Error::Data(format!(
                "dataset has {} classes, model expects {}",
                train.num_classes(),
                model.config.num_classes
            )));
        }
        let start = Instant::now();
        let epoch = self.state.epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.seeds.indexed(SHUFFLE, epoch as u64));
        let (mut loss_sum, mut lr) = (0.0, 0.0);
        let batches: Vec<&[usize]> = order.chunks(self.config.batch_size).collect();
        for idx in &batches {
            lr = cosine_lr(self.state.step, &self.schedule)?;
            let (images, targets) = self.mixed_batch(train, idx)?;
            let (loss, grads) = self.batch_grads(model, &images, &targets)?;
            model.params.zero_grad();
            model.params.accumulate(grads);
            let grad_norm = model.params.grad_norm();
            if !loss.is_finite() || !grad_norm.is_finite() {
                return Err(Error::NonFinite { step: self.state.step, lr, grad_norm });
            }
            sgd_step(&mut model.params, &mut self.optimizer, lr)?;
            model.params.zero_grad();
            loss_sum += loss;
            self.state.step += 1;
        }
        self.state.epoch += 1;
        let train_eval = evaluate(model, train)?;
        let val_eval = val.filter(|v| !v.is_empty()).map(|v| evaluate(model, v)).transpose()?;
        Ok(EpochMetrics {
            epoch: self.state.epoch,
            lr_last: lr,
            train_loss: loss_sum / batches.len() as f64,
            train_top1: train_eval.top1,
            val_top1: val_eval.as_ref().map(|r| r.top1),
            val_top5: val_eval.as_ref().map(|r| r.top5),
            wall_ms: start.elapsed().as_millis(),
        })
    }

    /// Runs the remaining epochs, calling `on_epoch` after each one.
    pub fn run(
        &mut self,
        model: &mut Covt,
        train: &Dataset,
        val: Option<&Dataset>,
        mut on_epoch: impl FnMut(&Trainer, &Covt, &EpochMetrics) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut log = Vec::new();
        while !self.is_done() {
            let m = self.run_epoch(model, train, val)?;
            on_epoch(self, model, &m)?;
            log.push(m);
        }
        Ok(log)
    }
}

/// Trains from scratch and returns the final state with the metrics log.
pub fn train(
    model: &mut Covt,
    dataset: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(TrainState, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(config.clone(), model, dataset.len())?;
    let log = trainer.run(model, dataset, val, |_, _, _| Ok(()))?;
    Ok((trainer.state, log))
}
