//! Minibatch training with Adam, temperature annealing and seeded
//! shuffling, plus noise-free evaluation.

mod adam;
pub mod checkpoint;
mod metrics;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use metrics::{auc, MetricsReport};

use crate::data::{positive_rate, InstanceSource};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::mcqm::QuantizeOptions;
use crate::model::Model;
use crate::params::Gradients;
use crate::seed::derive;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub tau_start: f32,
    pub tau_end: f32,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            batch_size: 32,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            epochs: 3,
            tau_start: 1.0,
            tau_end: 0.1,
            grad_clip: 5.0,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("train.batch_size and train.epochs must be positive"));
        }
        if !(self.tau_end > 0.0 && self.tau_start >= self.tau_end) {
            return Err(Error::config(format!(
                "need tau_start >= tau_end > 0, got {} and {}",
                self.tau_start, self.tau_end
            )));
        }
        if !(self.learning_rate >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::config("train.learning_rate and train.grad_clip must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::config("Adam betas must lie in [0, 1) and epsilon must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn steps_per_epoch(&self, instances: usize) -> usize {
        instances.div_ceil(self.batch_size)
    }
}

/// `τ_start·(τ_end/τ_start)^(step/(total−1))`: a constant per-step factor
/// that lands exactly on `τ_end` at the last step.
pub fn temperature(step: usize, total_steps: usize, start: f32, end: f32) -> f32 {
    if total_steps <= 1 {
        return start;
    }
    let frac = step.min(total_steps - 1) as f64 / (total_steps - 1) as f64;
    (start as f64 * (end as f64 / start as f64).powf(frac)) as f32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    /// Mean per-instance training loss (with Gumbel noise).
    pub train_loss: f64,
    pub temperature: f32,
    pub validation: Option<MetricsReport>,
}

const SHUFFLE_STREAM: u64 = 0x7368_7566;
const NOISE_STREAM: u64 = 0x6e6f_6973;

/// Batch forward/backward and update loop.
pub struct Trainer<'a> {
    pub model: &'a mut Model,
    pub config: TrainConfig,
    pub exec: Exec,
    adam: AdamState,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a mut Model, config: TrainConfig, exec: Exec) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(&model.store);
        Ok(Self {
            model,
            config,
            exec,
            adam,
            step: 0,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// One update on `batch` (indices into `source`). Returns the summed
    /// instance loss.
    pub fn train_batch<S: InstanceSource + ?Sized>(
        &mut self,
        source: &S,
        batch: &[usize],
        temperature: f32,
    ) -> Result<f64> {
        let step = self.step;
        let seed = self.config.seed;
        let model: &Model = self.model;
        let parts = self.exec.try_map(batch.len(), |j| {
            let inst = source.instance(batch[j]);
            let opts = QuantizeOptions {
                temperature,
                noise_seed: Some(derive(seed ^ NOISE_STREAM, step as u64, j as u64)),
            };
            model.loss_and_grads(&inst, opts)
        })?;
        let mut loss_sum = 0.0f64;
        let mut grads = Gradients::for_store(&model.store);
        for (loss, _, g) in &parts {
            loss_sum += loss;
            grads.accumulate(g);
        }
        drop(parts);
        if !loss_sum.is_finite() {
            return Err(Error::NonFinite {
                step,
                tensor: "loss".into(),
            });
        }
        grads.scale(1.0 / batch.len() as f32);
        if let Some(id) = grads.first_non_finite() {
            return Err(Error::NonFinite {
                step,
                tensor: format!("grad({})", model.store.name(id)),
            });
        }
        let clip = self.config.grad_clip;
        if clip > 0.0 {
            let norm = grads.global_norm();
            if norm > clip {
                grads.scale((clip / norm) as f32);
            }
        }
        adam_step(&mut self.model.store, &grads, &mut self.adam, &self.config.adam());
        if let Some(id) = self.model.store.ids().find(|&id| !self.model.store.get(id).is_finite()) {
            return Err(Error::NonFinite {
                step,
                tensor: self.model.store.name(id).to_owned(),
            });
        }
        self.step += 1;
        Ok(loss_sum)
    }

    /// Runs every epoch. `on_epoch` sees the model after each epoch (for
    /// checkpointing and validation) and may attach validation metrics.
    pub fn fit<S, F>(&mut self, source: &S, mut on_epoch: F) -> Result<Vec<EpochReport>>
    where
        S: InstanceSource + ?Sized,
        F: FnMut(&Model, &mut EpochReport) -> Result<()>,
    {
        let n = source.len();
        if n == 0 {
            return Err(Error::contract("training set is empty"));
        }
        let rate = positive_rate(source);
        if rate == 0.0 || rate == 1.0 {
            return Err(Error::contract("training set needs both positive and negative labels"));
        }
        let per_epoch = self.config.steps_per_epoch(n);
        let total = per_epoch * self.config.epochs;
        let mut reports = Vec::with_capacity(self.config.epochs);
        for epoch in 0..self.config.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive(self.config.seed, SHUFFLE_STREAM, epoch as u64));
            order.shuffle(&mut rng);
            let mut loss = 0.0f64;
            let mut tau = self.config.tau_start;
            for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
                tau = temperature(self.step, total, self.config.tau_start, self.config.tau_end);
                loss += self.train_batch(source, batch, tau)?;
                if b % 100 == 0 {
                    log::debug!("epoch {epoch} batch {b}/{per_epoch} tau {tau:.4}");
                }
            }
            let mut report = EpochReport {
                epoch,
                steps: per_epoch,
                train_loss: loss / n as f64,
                temperature: tau,
                validation: None,
            };
            on_epoch(self.model, &mut report)?;
            log::info!("epoch {epoch}: train loss {:.5}, tau {tau:.4}", report.train_loss);
            reports.push(report);
        }
        Ok(reports)
    }
}

/// Trains `model` on `source` with no per-epoch hook.
pub fn train<S: InstanceSource + ?Sized>(
    model: &mut Model,
    source: &S,
    config: &TrainConfig,
    exec: Exec,
) -> Result<Vec<EpochReport>> {
    Trainer::new(model, config.clone(), exec)?.fit(source, |_, _| Ok(()))
}

/// Noise-free predictions for every instance, in source order.
pub fn predict_all<S: InstanceSource + ?Sized>(model: &Model, source: &S, exec: Exec) -> Result<Vec<f32>> {
    exec.try_map(source.len(), |i| model.predict(&source.instance(i)))
}

pub fn evaluate<S: InstanceSource + ?Sized>(model: &Model, source: &S, exec: Exec) -> Result<MetricsReport> {
    let probs = predict_all(model, source, exec)?;
    let labels: Vec<u8> = (0..source.len()).map(|i| source.instance(i).label).collect();
    MetricsReport::compute(&probs, &labels)
}
