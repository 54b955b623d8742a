//! Training loop with periodic validation and early stopping.
//!
//! Every `check_interval` steps the current model regenerates the validation
//! images through the same path the receiver uses (radius-matched bank
//! index, `x_T = √(1−ᾱ_T)·ε`, conditional reverse diffusion) and the mean
//! perceptual proxy against the sources is compared with the target score.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::bank::{build_bank, select_noise, NoiseBank};
use crate::denoiser::{
    save_checkpoint, save_optimizer, train_step, DenoiserConfig, DenoiserModel, OptimizerKind,
    OptimizerState, TrainBatch, TrainExample,
};
use crate::diffusion::{sample, NoiseSchedule};
use crate::error::{Error, Result, ResultExt};
use crate::metrics::perceptual_proxy;
use crate::rng;
use crate::semantics::{scene_conditions, Scene, SemanticCondition, DEFAULT_EDGE_THRESHOLD};
use crate::tensor::Tensor;

pub const LATEST_CHECKPOINT: &str = "latest.dgn";
pub const LATEST_OPTIMIZER: &str = "latest.opt";
pub const BEST_CHECKPOINT: &str = "best.dgn";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub denoiser: DenoiserConfig,
    /// Stop once the validation score is at or below this.
    pub target_score: f64,
    pub check_interval: u64,
    pub validation_size: usize,
    pub max_steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub bank_size: usize,
    pub bank_seed: u64,
    /// Drives model init, batch order, diffusion steps and validation sampling.
    pub seed: u64,
    pub edge_threshold: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            denoiser: DenoiserConfig::default(),
            target_score: 0.25,
            check_interval: 1000,
            validation_size: 16,
            max_steps: 20_000,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            bank_size: 1000,
            bank_seed: 7,
            seed: 0,
            edge_threshold: DEFAULT_EDGE_THRESHOLD,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.denoiser.validate()?;
        if self.check_interval == 0 {
            return Err(Error::config("check interval must be at least 1"));
        }
        if self.validation_size == 0 {
            return Err(Error::config("validation size must be at least 1"));
        }
        if !(self.target_score >= 0.0) {
            return Err(Error::config(format!(
                "target score must be non-negative, got {}",
                self.target_score
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if self.bank_size == 0 {
            return Err(Error::config("bank size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    EarlyStop,
    MaxSteps,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::EarlyStop => "early-stop",
            StopReason::MaxSteps => "max-steps",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckRecord {
    pub step: u64,
    pub score: f64,
    pub stopped: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    /// Pre-update loss of step `i + 1`.
    pub losses: Vec<f64>,
    pub checks: Vec<CheckRecord>,
    pub stop_reason: Option<StopReason>,
}

impl TrainingLog {
    pub fn steps(&self) -> u64 {
        self.losses.len() as u64
    }

    pub fn stop_step(&self) -> u64 {
        self.steps()
    }

    pub fn best_check(&self) -> Option<CheckRecord> {
        self.checks
            .iter()
            .copied()
            .fold(None, |best: Option<CheckRecord>, c| match best {
                Some(b) if b.score <= c.score => Some(b),
                _ => Some(c),
            })
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{},{l}\n", i + 1));
        }
        s
    }

    pub fn score_csv(&self) -> String {
        let mut s = String::from("step,score,stopped\n");
        for c in &self.checks {
            s.push_str(&format!("{},{},{}\n", c.step, c.score, c.stopped as u8));
        }
        s
    }

    pub fn write_csvs(&self, loss_path: &Path, score_path: &Path) -> Result<()> {
        fs::File::create(loss_path)?.write_all(self.loss_csv().as_bytes())?;
        fs::File::create(score_path)?.write_all(self.score_csv().as_bytes())?;
        Ok(())
    }
}

/// True iff `score ≤ threshold`.
pub fn should_stop(score: f64, threshold: f64) -> bool {
    score <= threshold
}

/// One held-out image with its condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationItem {
    pub image: Tensor,
    pub condition: SemanticCondition,
}

pub fn validation_items(scenes: &[Scene], edge_threshold: f64) -> Result<Vec<ValidationItem>> {
    scenes
        .iter()
        .map(|s| {
            Ok(ValidationItem {
                image: s.image.clone(),
                condition: scene_conditions(s, edge_threshold)?,
            })
        })
        .collect()
}

/// Mean proxy between each source and `regenerate(i, item)`. Items run in
/// parallel; the mean is taken in item order.
pub fn score_regenerations<F>(items: &[ValidationItem], regenerate: F) -> Result<f64>
where
    F: Fn(usize, &ValidationItem) -> Result<Tensor> + Sync,
{
    if items.is_empty() {
        return Err(Error::config("validation set is empty"));
    }
    let scores: Vec<f64> = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| perceptual_proxy(&item.image, &regenerate(i, item)?))
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// The receiver-side regeneration of one source image: radius-matched index,
/// dropped-signal initialisation, reverse diffusion.
pub fn regenerate(
    model: &DenoiserModel,
    bank: &NoiseBank,
    schedule: &NoiseSchedule,
    image: &Tensor,
    condition: &SemanticCondition,
    seed: u64,
) -> Result<Tensor> {
    let report = select_noise(bank, image, schedule)?;
    let noise_scale = (1.0 - schedule.final_alpha_bar()).sqrt();
    let x_t = bank.tensor(report.best_index)?.map(|v| noise_scale * v);
    sample(model, condition, &x_t, schedule, seed)
}

pub fn evaluate_checkpoint(
    model: &DenoiserModel,
    bank: &NoiseBank,
    schedule: &NoiseSchedule,
    validation: &[ValidationItem],
    seed: u64,
) -> Result<f64> {
    score_regenerations(validation, |i, item| {
        let s = rng::derive_seed(seed, rng::stream::SAMPLER, i as u64);
        regenerate(model, bank, schedule, &item.image, &item.condition, s)
    })
}

/// Produces the validation score at a check.
pub trait Scorer {
    fn score(&mut self, model: &DenoiserModel, bank: &NoiseBank, step: u64) -> Result<f64>;
}

/// Scores with [`evaluate_checkpoint`] on a fixed held-out set.
pub struct ValidationScorer {
    pub items: Vec<ValidationItem>,
    pub seed: u64,
}

impl Scorer for ValidationScorer {
    fn score(&mut self, model: &DenoiserModel, bank: &NoiseBank, _step: u64) -> Result<f64> {
        evaluate_checkpoint(model, bank, model.schedule(), &self.items, self.seed)
    }
}

/// Replays a fixed list of scores; for exercising the stopping logic.
pub struct ScriptedScorer {
    pub scores: Vec<f64>,
    next: usize,
}

impl ScriptedScorer {
    pub fn new(scores: Vec<f64>) -> Self {
        ScriptedScorer { scores, next: 0 }
    }
}

impl Scorer for ScriptedScorer {
    fn score(&mut self, _: &DenoiserModel, _: &NoiseBank, _: u64) -> Result<f64> {
        let s = *self
            .scores
            .get(self.next)
            .ok_or_else(|| Error::config("scripted scores exhausted"))?;
        self.next += 1;
        Ok(s)
    }
}

struct TrainItem {
    image: Tensor,
    cond: Tensor,
}

/// Owns the model and optimizer for one training run. Step `λ` draws its
/// batch and noise from `(seed, λ)` alone, so a run resumed from a
/// checkpoint continues exactly as the uninterrupted one would.
pub struct Trainer<'a> {
    config: TrainingConfig,
    bank: &'a NoiseBank,
    items: Vec<TrainItem>,
    model: DenoiserModel,
    optimizer: OptimizerState,
    log: TrainingLog,
    epoch_order: Option<(u64, Vec<usize>)>,
    checkpoint_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainingConfig, train: &[Scene], bank: &'a NoiseBank) -> Result<Self> {
        config.validate()?;
        let model = DenoiserModel::new(config.denoiser, config.seed)?;
        let optimizer = OptimizerState::new(config.optimizer, model.param_count());
        Self::resume(config, train, bank, model, optimizer)
    }

    /// Continues from saved state; the step counter comes from the optimizer.
    pub fn resume(
        config: TrainingConfig,
        train: &[Scene],
        bank: &'a NoiseBank,
        model: DenoiserModel,
        optimizer: OptimizerState,
    ) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        if model.config() != &config.denoiser {
            return Err(Error::config("model architecture differs from the training config"));
        }
        if bank.shape() != config.denoiser.image_shape() {
            return Err(Error::ShapeMismatch {
                expected: config.denoiser.image_shape(),
                found: bank.shape(),
            });
        }
        let items = train
            .iter()
            .map(|s| {
                let m = scene_conditions(s, config.edge_threshold)?;
                Ok(TrainItem {
                    image: s.image.clone(),
                    cond: m.to_channels(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Trainer {
            config,
            bank,
            items,
            model,
            optimizer,
            log: TrainingLog::default(),
            epoch_order: None,
            checkpoint_dir: None,
        })
    }

    /// Writes latest/best checkpoints into `dir` at every check.
    pub fn with_checkpoints(mut self, dir: &Path) -> Self {
        self.checkpoint_dir = Some(dir.to_path_buf());
        self
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step_count()
    }

    pub fn model(&self) -> &DenoiserModel {
        &self.model
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    pub fn log(&self) -> &TrainingLog {
        &self.log
    }

    pub fn into_parts(self) -> (DenoiserModel, OptimizerState, TrainingLog) {
        (self.model, self.optimizer, self.log)
    }

    /// Dataset position `pos` under per-epoch shuffles.
    fn item_at(&mut self, pos: u64) -> usize {
        let n = self.items.len() as u64;
        let epoch = pos / n;
        if self.epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.items.len()).collect();
            order.shuffle(&mut rng::seeded(rng::derive_seed(
                self.config.seed,
                rng::stream::EPOCH,
                epoch,
            )));
            self.epoch_order = Some((epoch, order));
        }
        self.epoch_order.as_ref().unwrap().1[(pos % n) as usize]
    }

    fn batch_for(&mut self, step: u64) -> TrainBatch {
        let steps = self.config.denoiser.steps;
        let bs = self.config.batch_size as u64;
        let mut r = rng::seeded(rng::derive_seed(self.config.seed, rng::stream::TRAIN_STEP, step));
        let examples = (0..bs)
            .map(|j| {
                let item = self.item_at((step - 1) * bs + j);
                let t = r.gen_range(1..=steps);
                let index = r.gen_range(0..self.bank.len());
                TrainExample {
                    x0: self.items[item].image.clone(),
                    cond: self.items[item].cond.clone(),
                    t,
                    index,
                }
            })
            .collect();
        TrainBatch { examples }
    }

    /// Runs one optimisation step and returns its pre-update loss.
    pub fn train_once(&mut self) -> Result<f64> {
        let step = self.step() + 1;
        let batch = self.batch_for(step);
        let schedule = self.model.schedule().clone();
        let loss = train_step(
            &mut self.model,
            &batch,
            self.bank,
            &schedule,
            &mut self.optimizer,
            self.config.learning_rate,
        )?;
        self.log.losses.push(loss);
        Ok(loss)
    }

    fn save_checkpoints(&self, is_best: bool) -> Result<()> {
        if let Some(dir) = &self.checkpoint_dir {
            save_checkpoint(&self.model, &dir.join(LATEST_CHECKPOINT))?;
            save_optimizer(&self.optimizer, &dir.join(LATEST_OPTIMIZER))?;
            if is_best {
                save_checkpoint(&self.model, &dir.join(BEST_CHECKPOINT))?;
            }
        }
        Ok(())
    }

    /// Trains until the score target is met at a check or `max_steps` is
    /// reached.
    pub fn run(&mut self, scorer: &mut dyn Scorer) -> Result<StopReason> {
        let kappa = self.config.check_interval;
        while self.step() < self.config.max_steps {
            let loss = self.train_once().stage("training")?;
            let step = self.step();
            if !step.is_multiple_of(kappa) {
                continue;
            }
            let score = scorer.score(&self.model, self.bank, step).stage("validation")?;
            let stopped = should_stop(score, self.config.target_score);
            let is_best = self.log.best_check().is_none_or(|b| score < b.score);
            self.log.checks.push(CheckRecord {
                step,
                score,
                stopped,
            });
            self.save_checkpoints(is_best).stage("checkpoint")?;
            log::info!("step {step}: loss {loss:.5} score {score:.4}");
            if stopped {
                self.log.stop_reason = Some(StopReason::EarlyStop);
                return Ok(StopReason::EarlyStop);
            }
        }
        self.log.stop_reason = Some(StopReason::MaxSteps);
        Ok(StopReason::MaxSteps)
    }
}

#[derive(Debug)]
pub struct TrainingOutcome {
    pub model: DenoiserModel,
    pub optimizer: OptimizerState,
    pub bank: NoiseBank,
    pub log: TrainingLog,
}

/// Builds the bank, trains on `train` and scores on `validation`.
pub fn run_training(
    train: &[Scene],
    validation: &[Scene],
    config: &TrainingConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainingOutcome> {
    config.validate()?;
    if validation.len() < config.validation_size {
        return Err(Error::config(format!(
            "need {} validation scenes, got {}",
            config.validation_size,
            validation.len()
        )));
    }
    let bank = build_bank(config.bank_seed, config.bank_size, config.denoiser.image_shape())?;
    let items = validation_items(&validation[..config.validation_size], config.edge_threshold)?;
    let mut scorer = ValidationScorer {
        items,
        seed: rng::derive_seed(config.seed, rng::stream::VALIDATION, 0),
    };
    let (model, optimizer, log) = {
        let mut trainer = Trainer::new(config.clone(), train, &bank)?;
        if let Some(dir) = checkpoint_dir {
            trainer = trainer.with_checkpoints(dir);
        }
        trainer.run(&mut scorer)?;
        trainer.into_parts()
    };
    Ok(TrainingOutcome {
        model,
        optimizer,
        bank,
        log,
    })
}
