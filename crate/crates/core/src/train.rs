//! Denoiser training: minibatches of world windows with condition dropout,
//! the x0 objective, Adam, loss logging and resumable checkpoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autograd::Graph;
use crate::conditioning::{AudioCondition, Carry, ConditionBundle, DropoutPolicy};
use crate::denoiser::{Denoiser, DenoiserConfig, MotionScaler};
use crate::diffusion::{training_loss, NoiseSchedule, ScheduleConfig, TrainExample};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;
use crate::world::WorldSample;

pub const DENOISER_KIND: &str = "denoiser";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    /// Iterations of linear learning-rate warmup.
    pub warmup: usize,
    pub seed: u64,
    /// Loss is logged as the mean over each block of this many iterations.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            iterations: 3000,
            lr: 1e-3,
            warmup: 100,
            seed: 1,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        if iteration < self.warmup {
            self.lr * (iteration + 1) as f64 / self.warmup as f64
        } else {
            self.lr
        }
    }
}

/// Mean loss over one logging block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    /// 1-based index of the last iteration in the block.
    pub iteration: usize,
    pub loss: f64,
}

pub const LOSS_CSV_HEADER: &str = "iteration,loss";

impl LossRecord {
    pub fn csv_line(&self) -> String {
        format!("{},{}", self.iteration, self.loss)
    }
}

/// Deterministic rng for one iteration of a seeded run.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

/// Mean injected head distance over a dataset.
pub fn mean_distance(data: &[WorldSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InsufficientData("empty dataset".into()));
    }
    Ok(data.iter().map(|s| s.distance).sum::<f64>() / data.len() as f64)
}

/// The full condition bundle of the window at `start`, with carry when at
/// least `k` earlier frames exist.
pub fn window_conditions(sample: &WorldSample, start: usize, w: usize, k: usize) -> Result<ConditionBundle> {
    let carry = if k > 0 && start >= k {
        Some(Carry {
            motion: sample.motion.slice(start - k, k)?,
            audio: sample.audio.slice(start - k, k)?,
        })
    } else {
        None
    };
    Ok(ConditionBundle {
        audio: Some(AudioCondition::full(sample.audio.slice(start, w)?)),
        gaze: Some(sample.gaze),
        distance: Some(sample.distance),
        emotion: Some(sample.emotion.clone()),
        carry,
    })
}

pub struct DenoiserTrainer<'d> {
    model: Denoiser,
    opt: Adam,
    schedule: NoiseSchedule,
    schedule_config: ScheduleConfig,
    data: &'d [WorldSample],
    config: TrainConfig,
    dropout: DropoutPolicy,
    mean_distance: f64,
    iteration: usize,
    block: (f64, usize),
    log: Vec<LossRecord>,
}

impl<'d> DenoiserTrainer<'d> {
    /// Fresh weights from `train.seed`; the motion scaler is fitted on `data`.
    pub fn new(
        model_config: DenoiserConfig,
        schedule_config: ScheduleConfig,
        config: TrainConfig,
        data: &'d [WorldSample],
    ) -> Result<Self> {
        config.validate()?;
        check_data(&model_config, data)?;
        let mut model = Denoiser::new(model_config.clone(), config.seed)?;
        let scaler = MotionScaler::fit(data.iter().map(|s| s.motion.tensor()), model_config.motion_dim())?;
        model.set_scaler(scaler)?;
        Ok(Self {
            model,
            opt: Adam::new(AdamConfig {
                lr: config.lr,
                ..Default::default()
            }),
            schedule: NoiseSchedule::linear(&schedule_config)?,
            schedule_config,
            mean_distance: mean_distance(data)?,
            data,
            config,
            dropout: DropoutPolicy::default(),
            iteration: 0,
            block: (0.0, 0),
            log: Vec::new(),
        })
    }

    /// Continues a run from a checkpoint written by [`DenoiserTrainer::checkpoint`].
    pub fn resume(archive: &Archive, config: TrainConfig, data: &'d [WorldSample]) -> Result<Self> {
        config.validate()?;
        let loaded = load_denoiser(archive)?;
        check_data(loaded.model.config(), data)?;
        let mut opt = Adam::new(AdamConfig {
            lr: config.lr,
            ..Default::default()
        });
        let steps = archive.meta_f64("train.adam_steps")? as u64;
        if steps > 0 {
            let store = loaded.model.store();
            let mut m = Vec::with_capacity(store.len());
            let mut v = Vec::with_capacity(store.len());
            for p in store.iter() {
                m.push(archive.require(&format!("adam.m.{}", p.name()))?.data().to_vec());
                v.push(archive.require(&format!("adam.v.{}", p.name()))?.data().to_vec());
            }
            opt.restore(steps, m, v)?;
        }
        let iteration = archive.meta_f64("train.iteration")? as usize;
        Ok(Self {
            schedule: NoiseSchedule::linear(&loaded.schedule)?,
            schedule_config: loaded.schedule,
            model: loaded.model,
            opt,
            data,
            config,
            dropout: DropoutPolicy::default(),
            mean_distance: loaded.mean_distance,
            iteration,
            block: (0.0, 0),
            log: Vec::new(),
        })
    }

    pub fn set_dropout(&mut self, dropout: DropoutPolicy) {
        self.dropout = dropout;
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn into_model(self) -> Denoiser {
        self.model
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn mean_distance(&self) -> f64 {
        self.mean_distance
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Completed logging blocks so far in this session.
    pub fn log(&self) -> &[LossRecord] {
        &self.log
    }

    /// Draws a minibatch of training windows.
    pub fn minibatch(&self, rng: &mut impl Rng) -> Result<Vec<TrainExample>> {
        let cfg = self.model.config();
        let (w, k) = (cfg.window, cfg.overlap);
        (0..self.config.batch_size)
            .map(|_| {
                let s = &self.data[rng.gen_range(0..self.data.len())];
                let start = rng.gen_range(0..=s.motion.frames() - w);
                let cond = window_conditions(s, start, w, k)?;
                let cond = self.dropout.apply(&cond, rng);
                let x0 = self.model.scaler().encode(s.motion.slice(start, w)?.tensor());
                Ok(TrainExample { x0, cond })
            })
            .collect()
    }

    /// One optimizer step; returns the minibatch loss. Completes a log
    /// record every `log_every` iterations.
    pub fn step(&mut self) -> Result<Option<LossRecord>> {
        let it = self.iteration;
        let mut rng = iteration_rng(self.config.seed, it);
        let batch = self.minibatch(&mut rng)?;
        let (loss, grads) = {
            let mut g = Graph::new(self.model.store());
            let l = training_loss(&self.model, &mut g, &self.schedule, &batch, &mut rng)?;
            let loss = g.value(l).item();
            if !loss.is_finite() {
                return Err(Error::Training {
                    iteration: it + 1,
                    message: format!("loss is {loss}"),
                });
            }
            (loss, g.backward(l)?)
        };
        let store = self.model.store_mut();
        store.zero_grad();
        grads.accumulate_into(store);
        self.opt
            .step_with_lr(store, self.config.lr_at(it))
            .map_err(|e| match e {
                Error::Training { message, .. } => Error::Training {
                    iteration: it + 1,
                    message,
                },
                other => other,
            })?;
        self.iteration += 1;
        self.block.0 += loss;
        self.block.1 += 1;
        if self.iteration % self.config.log_every == 0 {
            let rec = LossRecord {
                iteration: self.iteration,
                loss: self.block.0 / self.block.1 as f64,
            };
            self.block = (0.0, 0);
            self.log.push(rec);
            return Ok(Some(rec));
        }
        Ok(None)
    }

    /// Runs until `config.iterations` total iterations, calling `on_log`
    /// for each completed record.
    pub fn run(&mut self, mut on_log: impl FnMut(&LossRecord) -> Result<()>) -> Result<()> {
        while self.iteration < self.config.iterations {
            if let Some(rec) = self.step()? {
                on_log(&rec)?;
            }
        }
        Ok(())
    }

    /// Weights, scaler, optimizer state and config echo.
    pub fn checkpoint(&self) -> Result<Archive> {
        let mut a = save_denoiser(&self.model, &self.schedule_config, self.mean_distance)?;
        let (m, v) = self.opt.moments();
        for (i, p) in self.model.store().iter().enumerate() {
            if let (Some(m), Some(v)) = (m.get(i), v.get(i)) {
                let shape = p.value().shape().to_vec();
                a.push(format!("adam.m.{}", p.name()), Tensor::new(shape.clone(), m.clone())?);
                a.push(format!("adam.v.{}", p.name()), Tensor::new(shape, v.clone())?);
            }
        }
        a.set_meta("train.iteration", self.iteration);
        a.set_meta("train.adam_steps", self.opt.steps_taken());
        a.put_config("train", &self.config)?;
        Ok(a)
    }
}

fn check_data(cfg: &DenoiserConfig, data: &[WorldSample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    for s in data {
        if s.motion.frames() < cfg.window {
            return Err(Error::InsufficientData(format!(
                "training sequences need at least {} frames, found {}",
                cfg.window,
                s.motion.frames()
            )));
        }
        if s.motion.dim() != cfg.motion_dim() || s.audio.dim() != cfg.audio_dim || s.emotion.len() != cfg.emotion_dim {
            return Err(Error::Incompatible(format!(
                "dataset frames ({} motion, {} audio, {} emotion) do not match the model ({}, {}, {})",
                s.motion.dim(),
                s.audio.dim(),
                s.emotion.len(),
                cfg.motion_dim(),
                cfg.audio_dim,
                cfg.emotion_dim
            )));
        }
    }
    Ok(())
}

/// A denoiser restored from a checkpoint.
pub struct LoadedDenoiser {
    pub model: Denoiser,
    pub schedule: ScheduleConfig,
    /// Training-set mean distance, the default distance condition.
    pub mean_distance: f64,
}

impl LoadedDenoiser {
    /// Errors when `expected` differs from the checkpoint's config.
    pub fn check_config(&self, expected: &DenoiserConfig) -> Result<()> {
        if self.model.config() != expected {
            return Err(Error::Incompatible(format!(
                "checkpoint was trained with {:?}, config requests {:?}",
                self.model.config(),
                expected
            )));
        }
        Ok(())
    }
}

pub fn save_denoiser(model: &Denoiser, schedule: &ScheduleConfig, mean_distance: f64) -> Result<Archive> {
    let mut a = Archive::from_params(model.store());
    let m = model.config().motion_dim();
    a.push("scaler.mean", Tensor::new([m], model.scaler().mean.clone())?);
    a.push("scaler.std", Tensor::new([m], model.scaler().std.clone())?);
    a.set_meta("kind", DENOISER_KIND);
    a.set_meta("mean_distance", mean_distance);
    a.put_config("denoiser", model.config())?;
    a.put_config("schedule", schedule)?;
    Ok(a)
}

pub fn load_denoiser(a: &Archive) -> Result<LoadedDenoiser> {
    if a.meta("kind") != Some(DENOISER_KIND) {
        return Err(Error::Format(format!(
            "expected a {DENOISER_KIND} checkpoint, found kind {:?}",
            a.meta("kind")
        )));
    }
    let config: DenoiserConfig = a.get_config("denoiser")?;
    config.validate()?;
    let schedule: ScheduleConfig = a.get_config("schedule")?;
    let mut store = crate::params::ParamStore::new();
    let fresh = Denoiser::new(config.clone(), 0)?;
    for p in fresh.store().iter() {
        let t = a.get(p.name()).ok_or_else(|| {
            Error::Incompatible(format!("checkpoint lacks parameter {} of the configured model", p.name()))
        })?;
        store.add(p.name(), t.clone())?;
    }
    let scaler = MotionScaler {
        mean: a.require("scaler.mean")?.data().to_vec(),
        std: a.require("scaler.std")?.data().to_vec(),
    };
    let model = Denoiser::from_parts(config, store, scaler)?;
    Ok(LoadedDenoiser {
        model,
        schedule,
        mean_distance: a.meta_f64("mean_distance")?,
    })
}
