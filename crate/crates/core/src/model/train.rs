use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::{LossSpec, ModelParams};
use crate::rng;
use crate::scene::SceneSample;
use crate::{Error, Result};

/// Update rule applied to the averaged minibatch gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "lowercase"))]
pub enum Optimizer {
    /// Heavy-ball momentum; 0 gives plain SGD.
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub const fn sgd() -> Self {
        Optimizer::Sgd { momentum: 0.0 }
    }

    pub const fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning-rate schedule over the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero at the last step.
    #[default]
    Cosine,
}

/// Minibatch training settings for `L = L_d + λ·L_z`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub schedule: LrSchedule,
    /// Dropout rate applied during training (0 disables it).
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            batch_size: 4,
            epochs: 60,
            learning_rate: 3e-3,
            optimizer: Optimizer::adam(),
            schedule: LrSchedule::Cosine,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig("learning rate must be >= 0".into()));
        }
        let ok = match self.optimizer {
            Optimizer::Sgd { momentum } => (0.0..1.0).contains(&momentum),
            Optimizer::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if !ok {
            return Err(Error::InvalidConfig(format!("invalid optimizer {:?}", self.optimizer)));
        }
        Ok(())
    }
}

/// Mean batch losses over one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_density: f64,
    pub loss_depth: f64,
    pub loss_total: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainLog {
    /// Losses of the initial weights over the whole training split.
    pub initial: EpochLog,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn final_density_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial.loss_density, |e| e.loss_density)
    }
}

fn evaluate(params: &ModelParams, samples: &[SceneSample], lambda: f64) -> Result<EpochLog> {
    let mut ld = 0.0;
    let mut lz = 0.0;
    for s in samples {
        let p = params.forward(&s.image)?;
        let parts = super::loss(&p, &s.density_gt, &s.depth_gt, lambda)?;
        ld += parts.density;
        lz += parts.depth;
    }
    let n = samples.len() as f64;
    Ok(EpochLog {
        epoch: 0,
        loss_density: ld / n,
        loss_depth: lz / n,
        loss_total: (ld + lambda * lz) / n,
    })
}

/// Trains `params` in place. Deterministic given the config seed.
pub fn train(params: &mut ModelParams, samples: &[SceneSample], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    params.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    for s in samples {
        params.shape().ensure_eq(s.shape())?;
    }
    params.lambda = cfg.lambda;

    let initial = evaluate(params, samples, cfg.lambda)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut shuffle_rng = rng::seeded(rng::derive(cfg.seed, 0x5407, 0));
    let mut drop_rng = rng::seeded(rng::derive(cfg.seed, 0x5407, 1));
    let mut grads = vec![0.0f64; params.weights.len()];
    let mut first = vec![0.0f64; params.weights.len()];
    let mut second = vec![0.0f64; params.weights.len()];
    let mut step = 0i32;
    let total_steps = cfg.epochs * samples.len().div_ceil(cfg.batch_size);
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut sum_d, mut sum_z, mut sum_t, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (batch_index, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.fill(0.0);
            let b = batch.len() as f64;
            let (mut ld, mut lz) = (0.0, 0.0);
            for &i in batch {
                let s = &samples[i];
                let spec = LossSpec {
                    density_ref: &s.density_gt,
                    density_weight: 1.0 / b,
                    depth_ref: Some(&s.depth_gt),
                    depth_weight: cfg.lambda / b,
                };
                let drop = (cfg.dropout > 0.0).then_some((cfg.dropout, &mut drop_rng));
                let parts = params.sample_gradient(&s.image, &spec, &mut grads, drop)?;
                ld += parts.density / b;
                lz += parts.depth / b;
            }
            let total = ld + cfg.lambda * lz;
            if !total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_index,
                    loss: total,
                });
            }
            let lr = match cfg.schedule {
                LrSchedule::Constant => cfg.learning_rate,
                LrSchedule::Cosine => {
                    let progress = step as f64 / total_steps as f64;
                    0.5 * cfg.learning_rate * (1.0 + crate::math::cos(core::f64::consts::PI * progress))
                }
            };
            step += 1;
            match cfg.optimizer {
                Optimizer::Sgd { momentum } => {
                    for ((w, v), g) in params.weights.iter_mut().zip(&mut first).zip(&grads) {
                        *v = momentum * *v + g;
                        *w = (*w as f64 - lr * *v) as f32;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - libm::pow(beta1, step as f64);
                    let c2 = 1.0 - libm::pow(beta2, step as f64);
                    for (((w, m), v), g) in params
                        .weights
                        .iter_mut()
                        .zip(&mut first)
                        .zip(&mut second)
                        .zip(&grads)
                    {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let update = lr * (*m / c1) / (crate::math::sqrt(*v / c2) + eps);
                        *w = (*w as f64 - update) as f32;
                    }
                }
            }
            sum_d += ld;
            sum_z += lz;
            sum_t += total;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        epochs.push(EpochLog {
            epoch,
            loss_density: sum_d / n,
            loss_depth: sum_z / n,
            loss_total: sum_t / n,
        });
    }
    if params.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Diverged {
            epoch: cfg.epochs,
            batch: 0,
            loss: f64::NAN,
        });
    }
    Ok(TrainLog { initial, epochs })
}
