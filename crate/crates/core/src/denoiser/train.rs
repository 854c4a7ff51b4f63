use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{adam_step, AdamState, EmaState, DEFAULT_EMA_MOMENTUM};
use super::unet::TinyUNet;
use crate::error::{Error, Result};
use crate::param::{forward_diffuse, make_target, training_loss, training_loss_grad, PredictionKind};
use crate::rng::NoiseRng;
use crate::schedule::NoiseSchedule;
use crate::volume::{rigid_transform, DType, RigidTransform, Volume};

/// Limits of the random rigid motion applied to each training example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rotation_deg: f64,
    pub translation_mm: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: 10.0,
            translation_mm: 5.0,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            rotation_deg: 0.0,
            translation_mm: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.translation_mm == 0.0
    }

    fn validate(&self) -> Result<()> {
        if !(self.rotation_deg >= 0.0 && self.translation_mm >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "augmentation limits must be nonnegative, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Draws angles and shifts uniformly within the limits, per axis.
    pub fn draw(&self, rng: &mut NoiseRng) -> RigidTransform {
        let r = self.rotation_deg;
        let s = self.translation_mm;
        RigidTransform {
            angles_deg: std::array::from_fn(|_| rng.uniform_range(-r, r)),
            shift_mm: std::array::from_fn(|_| rng.uniform_range(-s, s)),
        }
    }
}

/// Random rigid augmentation of an isotropic volume.
pub fn augment(v: &Volume, cfg: &AugmentConfig, seed: u64) -> Result<Volume> {
    cfg.validate()?;
    let sp = v.spacing();
    if sp.iter().any(|&s| (s - sp[0]).abs() > 1e-6 * sp[0]) {
        return Err(Error::InvalidParameter(format!(
            "augmentation expects isotropic spacing, got {sp:?}"
        )));
    }
    let mut rng = NoiseRng::new(seed);
    rigid_transform(v, &cfg.draw(&mut rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub augment: AugmentConfig,
    pub ema_momentum: f64,
    pub seed: u64,
    /// Replaces the gradient of this (1-based) epoch's first step with NaN.
    /// Exists to exercise divergence handling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inject_nan_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 24,
            epochs: 100,
            augment: AugmentConfig::default(),
            ema_momentum: DEFAULT_EMA_MOMENTUM,
            seed: 0,
            inject_nan_epoch: None,
        }
    }
}

impl TrainConfig {
    /// Settings for tiny volumes on a single CPU. The step size is larger
    /// than the full-scale default because a run lasts a few hundred steps
    /// rather than hundreds of thousands.
    pub fn desk() -> Self {
        Self {
            lr: 3e-3,
            batch_size: 4,
            epochs: 200,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidParameter(format!(
                "lr, batch_size and epochs must be positive (lr={}, batch={}, epochs={})",
                self.lr, self.batch_size, self.epochs
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::InvalidParameter(format!(
                "ema momentum {} outside [0, 1]",
                self.ema_momentum
            )));
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    pub last_good_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Raw weights after the last good epoch.
    pub net: TinyUNet,
    pub ema: EmaState,
    pub history: Vec<EpochRecord>,
    pub divergence: Option<Divergence>,
}

impl TrainOutcome {
    /// Epochs that completed with finite weights.
    pub fn completed_epochs(&self) -> usize {
        self.history.iter().filter(|r| !r.diverged).count()
    }

    /// The network carrying the EMA shadow weights, which is what inference
    /// should use.
    pub fn ema_net(&self) -> Result<TinyUNet> {
        match self.ema.shadow() {
            Some(shadow) => self.net.clone().with_params(shadow),
            None => Ok(self.net.clone()),
        }
    }

    /// Turns a recorded divergence into an error.
    pub fn check(&self) -> Result<()> {
        match self.divergence {
            Some(d) => Err(Error::TrainingDiverged {
                epoch: Some(d.epoch),
                last_good_epoch: d.last_good_epoch,
            }),
            None => Ok(()),
        }
    }

    pub fn write_history_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for r in &self.history {
            w.serialize(r).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Trains `net` in place on `dataset`, returning the final state.
///
/// Every epoch runs `ceil(n / batch_size)` optimizer steps. A step draws
/// `batch_size` examples with replacement and, per example, a uniform step
/// index, fresh noise and an augmentation; the batch gradient is the mean of
/// the per-example MSE gradients. The EMA is updated after each epoch.
///
/// A non-finite loss, gradient or weight stops training: weights and EMA
/// are rolled back to the end of the last good epoch and the
/// event is recorded in [`TrainOutcome::divergence`].
pub fn train(
    mut net: TinyUNet,
    dataset: &[Volume],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dims = dataset[0].dims();
    for v in dataset {
        if v.dims() != dims {
            return Err(Error::shape(&dims, &v.dims()));
        }
    }
    let kind = crate::denoiser::Denoiser::kind(&net);
    let images: Vec<Vec<f64>> = dataset.iter().map(training_values).collect();

    let n_params = net.param_count();
    let mut adam = AdamState::new(n_params);
    let mut ema = EmaState::new(cfg.ema_momentum);
    let mut history = Vec::with_capacity(cfg.epochs);
    let steps_per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let mut last_good: Option<usize> = None;
    let mut divergence = None;

    for epoch in 1..=cfg.epochs {
        let snapshot = net.params().to_vec();
        let mut loss_sum = 0.0;
        let mut ok = true;
        for step in 0..steps_per_epoch {
            let step_seed = ((epoch - 1) * steps_per_epoch + step) as u64;
            let (loss, mut grad) = batch_gradient(&net, kind, dataset, &images, schedule, cfg, step_seed)?;
            if cfg.inject_nan_epoch == Some(epoch) && step == 0 {
                grad[0] = f64::NAN;
            }
            if !loss.is_finite() {
                ok = false;
                break;
            }
            match adam_step(net.params_mut(), &grad, &mut adam, cfg.lr) {
                Ok(()) => {}
                Err(Error::TrainingDiverged { .. }) => {
                    ok = false;
                    break;
                }
                Err(e) => return Err(e),
            }
            if net.params().iter().any(|p| !p.is_finite()) {
                ok = false;
                break;
            }
            loss_sum += loss;
        }
        if !ok {
            // Training stops here, so only the weights need restoring; the
            // EMA was last updated at the end of the previous good epoch.
            net.set_params(&snapshot)?;
            history.push(EpochRecord {
                epoch,
                mean_loss: f64::NAN,
                diverged: true,
            });
            divergence = Some(Divergence {
                epoch,
                last_good_epoch: last_good,
            });
            break;
        }
        ema.update(net.params())?;
        history.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / steps_per_epoch as f64,
            diverged: false,
        });
        last_good = Some(epoch);
    }

    Ok(TrainOutcome {
        net,
        ema,
        history,
        divergence,
    })
}

/// Voxel values as the network sees them: `u16` volumes are mapped to
/// [0, 1]; float volumes are used as stored.
pub fn training_values(v: &Volume) -> Vec<f64> {
    let mut x = v.to_f64();
    if v.dtype() == DType::U16 {
        for xi in &mut x {
            *xi /= u16::MAX as f64;
        }
    }
    x
}

fn batch_gradient(
    net: &TinyUNet,
    kind: PredictionKind,
    dataset: &[Volume],
    images: &[Vec<f64>],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    step_seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let dims = dataset[0].dims();
    let t_max = schedule.len();
    let per_item: Vec<Result<(f64, Vec<f64>)>> = (0..cfg.batch_size)
        .into_par_iter()
        .map(|b| {
            let mut rng = NoiseRng::derive(cfg.seed, step_seed * cfg.batch_size as u64 + b as u64);
            let idx = rng.below(dataset.len());
            let t = rng.below(t_max);
            let aug_seed = rng.next_u64();
            let x0 = if cfg.augment.is_identity() {
                images[idx].clone()
            } else {
                let moved = augment(&dataset[idx], &cfg.augment, aug_seed)?;
                training_values(&moved)
            };
            let eps = rng.gaussian_vec(x0.len());
            let ab = schedule.ab(t)?;
            let xt = forward_diffuse(&x0, &eps, ab)?;
            let target = make_target(kind, &x0, &eps, ab)?;
            let (pred, cache) = net.forward_cached(&xt, dims, t)?;
            let loss = training_loss(kind, &pred, &target)?;
            let upstream = training_loss_grad(&pred, &target)?;
            let mut grad = vec![0.0; net.param_count()];
            net.backward_into(&cache, &upstream, &mut grad)?;
            Ok((loss, grad))
        })
        .collect();

    // Summed in batch order so the result does not depend on thread timing.
    let scale = 1.0 / cfg.batch_size as f64;
    let mut total = vec![0.0; net.param_count()];
    let mut loss = 0.0;
    for item in per_item {
        let (l, g) = item?;
        loss += l;
        for (a, b) in total.iter_mut().zip(&g) {
            *a += b;
        }
    }
    for g in &mut total {
        *g *= scale;
    }
    Ok((loss * scale, total))
}
