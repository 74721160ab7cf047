//! Training loop: patch sampling, augmentation, deep-supervised loss, AdamW.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use factorizer_tensor::{Graph, Real, Tensor};
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::config::ConfigMap;
use crate::data::{augment, random_patch, AugmentPolicy, VolumeSample};
use crate::error::{usage, Error, Result};
use crate::loss::{one_hot, target_pyramid, total_loss};
use crate::network::Factorizer;
use crate::optim::{AdamW, Schedule};
use crate::params::Ctx;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Micro-batches accumulated per optimizer step.
    pub accumulation: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub patch_size: [usize; 3],
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100_000,
            batch_size: 2,
            accumulation: 1,
            base_lr: 1e-4,
            weight_decay: 1e-2,
            warmup_steps: 2000,
            seed: 0,
            patch_size: [128; 3],
            checkpoint_every: 0,
            log_every: 1,
            augment: AugmentPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "steps", "batch_size", "accumulation", "base_lr", "weight_decay", "warmup_steps", "seed", "checkpoint_every",
        "log_every", "augment",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.accumulation == 0 {
            return Err(Error::Config("steps, batch_size and accumulation must be positive".into()));
        }
        if self.warmup_steps >= self.steps {
            return Err(Error::Config(format!("warmup_steps {} must be below steps {}", self.warmup_steps, self.steps)));
        }
        if !(self.base_lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("base_lr must be positive and weight_decay nonnegative".into()));
        }
        self.augment.validate()
    }

    /// Reads `train.*` keys; the patch size comes from the model.
    pub fn from_map(map: &ConfigMap, patch_size: [usize; 3]) -> Result<Self> {
        map.check_known("train", Self::KEYS)?;
        let s = map.section("train");
        let d = Self::default();
        let cfg = Self {
            steps: s.get_or("steps", d.steps)?,
            batch_size: s.get_or("batch_size", d.batch_size)?,
            accumulation: s.get_or("accumulation", d.accumulation)?,
            base_lr: s.get_or("base_lr", d.base_lr)?,
            weight_decay: s.get_or("weight_decay", d.weight_decay)?,
            warmup_steps: s.get_or("warmup_steps", d.warmup_steps)?,
            seed: s.get_or("seed", d.seed)?,
            patch_size,
            checkpoint_every: s.get_or("checkpoint_every", d.checkpoint_every)?,
            log_every: s.get_or("log_every", d.log_every)?.max(1),
            augment: if s.get_bool("augment", true)? { AugmentPolicy::default() } else { AugmentPolicy::none() },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn schedule(&self) -> Schedule {
        Schedule { base_lr: self.base_lr, warmup: self.warmup_steps, total: self.steps }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tlr\tloss\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{:.6e}\t{:.6}", r.step, r.lr, r.loss);
        }
        out
    }

    /// Mean loss over rows with `lo <= step < hi`.
    pub fn mean_loss(&self, lo: usize, hi: usize) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.step >= lo && r.step < hi).map(|r| r.loss).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Input and target pyramid for one micro-batch.
pub struct Batch<T: Real> {
    pub input: Tensor<T>,
    pub targets: Vec<Tensor<T>>,
}

/// Draws, crops and augments `cfg.batch_size` samples. Every draw comes
/// from a stream keyed by `(seed, step, micro)`.
pub fn sample_batch<T: Real>(
    data: &[VolumeSample],
    model: &Factorizer<T>,
    cfg: &TrainConfig,
    step: usize,
    micro: usize,
) -> Result<Batch<T>> {
    let classes = model.config.foreground_classes();
    let levels = model.config.supervised_levels();
    let mut rng = rng::stream(cfg.seed, &[0x7EA1, step as u64, micro as u64]);
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..cfg.batch_size {
        let sample = &data[rng.gen_range(0..data.len())];
        let patch = random_patch(sample, cfg.patch_size, &mut rng)?;
        let patch = augment(&patch, &cfg.augment, &mut rng)?;
        if patch.channels() != model.config.in_channels {
            return Err(usage(format!("sample `{}` has {} channels, the model expects {}", sample.id, patch.channels(), model.config.in_channels)));
        }
        inputs.extend(patch.image.data().iter().map(|&v| T::lit(v as f64)));
        targets.extend_from_slice(one_hot::<T>(&patch.label, patch.dims(), classes)?.data());
    }
    let [h, w, d] = cfg.patch_size;
    let b = cfg.batch_size;
    let input = Tensor::new(vec![b, model.config.in_channels, h, w, d], inputs)?;
    let target = Tensor::new(vec![b, classes, h, w, d], targets)?;
    Ok(Batch { input, targets: target_pyramid(&target, levels)? })
}

/// Loss and per-parameter gradients of one micro-batch.
pub fn loss_and_grads<T: Real>(model: &Factorizer<T>, batch: &Batch<T>, step: usize) -> Result<(f64, Vec<Tensor<T>>)> {
    let g = Graph::new();
    let ctx = Ctx::new(&g, &model.params, true).with_step(step as u64);
    let out = model.forward(&ctx, g.constant(batch.input.clone()), true)?;
    let loss = total_loss(&out, &batch.targets, model.config.activation)?;
    let value = loss.value().item()?.as_f64();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let mut grads = g.backward(loss)?;
    Ok((value, ctx.collect_grads(&mut grads)?))
}

pub struct Trainer<'a, T: Real> {
    pub model: &'a mut Factorizer<T>,
    pub optimizer: AdamW,
    pub cfg: TrainConfig,
    pub log: TrainLog,
    /// Directory for periodic and final checkpoints and the log.
    pub out_dir: Option<PathBuf>,
    pub step: usize,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(model: &'a mut Factorizer<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.patch_size != model.config.patch_size {
            return Err(Error::Config(format!(
                "training patch {:?} differs from the model patch {:?}",
                cfg.patch_size, model.config.patch_size
            )));
        }
        let optimizer = AdamW::new(&model.params, cfg.weight_decay);
        Ok(Self { model, optimizer, cfg, log: TrainLog::default(), out_dir: None, step: 0 })
    }

    pub fn with_output(mut self, dir: impl AsRef<Path>) -> Self {
        self.out_dir = Some(dir.as_ref().to_path_buf());
        self
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::capture(self.model, self.step, Some(&self.optimizer))
    }

    fn save(&self, name: &str) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            self.checkpoint().save(&dir.join(name))?;
            std::fs::write(dir.join("train_log.tsv"), self.log.to_tsv())?;
        }
        Ok(())
    }

    /// One optimizer step over `accumulation` micro-batches.
    pub fn step_once(&mut self, data: &[VolumeSample]) -> Result<f64> {
        let step = self.step;
        let acc = self.cfg.accumulation;
        let mut total: Option<Vec<Tensor<T>>> = None;
        let mut loss_sum = 0.0;
        for micro in 0..acc {
            let batch = sample_batch(data, self.model, &self.cfg, step, micro)?;
            let (loss, grads) = loss_and_grads(self.model, &batch, step)?;
            if !loss.is_finite() {
                self.save("last_good.ckpt")?;
                return Err(Error::Diverged { step, reason: format!("loss is {loss}") });
            }
            loss_sum += loss;
            total = Some(match total {
                None => grads,
                Some(t) => t.iter().zip(&grads).map(|(a, b)| a.zip_with(b, |x, y| x + y)).collect::<std::result::Result<_, _>>()?,
            });
        }
        let mut grads = total.expect("at least one micro-batch");
        if acc > 1 {
            let scale = T::lit(1.0 / acc as f64);
            grads = grads.iter().map(|g| g.map(|v| v * scale)).collect();
        }
        let lr = self.cfg.schedule().lr(step);
        self.optimizer.step(&mut self.model.params, &grads, lr)?;
        let loss = loss_sum / acc as f64;
        if step % self.cfg.log_every == 0 || step + 1 == self.cfg.steps {
            self.log.rows.push(LogRow { step, lr, loss });
        }
        self.step += 1;
        Ok(loss)
    }

    /// Runs the remaining steps; `observe` sees each step's loss.
    pub fn run(&mut self, data: &[VolumeSample], mut observe: impl FnMut(usize, f64)) -> Result<()> {
        if data.is_empty() {
            return Err(usage("training set is empty"));
        }
        while self.step < self.cfg.steps {
            let step = self.step;
            let loss = self.step_once(data)?;
            observe(step, loss);
            if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 && self.step < self.cfg.steps {
                self.save(&format!("step_{:06}.ckpt", self.step))?;
            }
        }
        self.save("final.ckpt")
    }
}

/// Builds a trainer, runs it to completion and returns the log.
pub fn train<T: Real>(model: &mut Factorizer<T>, data: &[VolumeSample], cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainLog> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    if let Some(dir) = out_dir {
        trainer = trainer.with_output(dir);
    }
    trainer.run(data, |_, _| {})?;
    Ok(trainer.log)
}
