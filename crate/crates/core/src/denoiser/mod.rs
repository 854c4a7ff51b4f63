//! Denoiser interface, the closed-form Gaussian oracle, the trainable
//! U-Net and its training loop.

mod layers;
mod optim;
mod train;
mod unet;
mod weights;

pub use optim::{adam_step, AdamState, EmaState, DEFAULT_EMA_MOMENTUM};
pub use train::{augment, train, training_values, AugmentConfig, Divergence, EpochRecord, TrainConfig, TrainOutcome};
pub use unet::{unet_backward, unet_forward, ForwardCache, TinyUNet, UNetConfig};
pub use weights::{decode_model, encode_model, load_model, save_model, LoadedModel, ModelSpec, WeightsHeader};

use crate::error::{Error, Result};
use crate::param::{eps_from_x0, make_target, PredictionKind};
use crate::schedule::NoiseSchedule;

/// Time-conditioned predictor. Implementations must be shape-preserving,
/// deterministic and safe to share across threads.
pub trait Denoiser: Sync {
    fn kind(&self) -> PredictionKind;

    /// Prediction of this denoiser's kind for the noised volume `xt`
    /// (x fastest, `dims` voxels) at schedule step `t`.
    fn predict(&self, xt: &[f64], dims: [usize; 3], t: usize) -> Result<Vec<f64>>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn kind(&self) -> PredictionKind {
        (**self).kind()
    }

    fn predict(&self, xt: &[f64], dims: [usize; 3], t: usize) -> Result<Vec<f64>> {
        (**self).predict(xt, dims, t)
    }
}

/// Exact denoiser for data distributed as `N(mean, variance * I)`.
///
/// The posterior mean is
/// `E[x0 | xt] = (sqrt(ab) * s2 * xt + (1 - ab) * m) / (ab * s2 + 1 - ab)`,
/// converted to the requested prediction kind.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    mean: Vec<f64>,
    variance: f64,
    schedule: NoiseSchedule,
    kind: PredictionKind,
}

impl GaussianOracle {
    /// `mean` is either one value per voxel or a single value broadcast to
    /// every voxel.
    pub fn new(mean: Vec<f64>, variance: f64, schedule: NoiseSchedule, kind: PredictionKind) -> Self {
        assert!(variance >= 0.0, "variance must be nonnegative");
        assert!(!mean.is_empty(), "mean must not be empty");
        Self {
            mean,
            variance,
            schedule,
            kind,
        }
    }

    pub fn constant(mean: f64, variance: f64, schedule: NoiseSchedule, kind: PredictionKind) -> Self {
        Self::new(vec![mean], variance, schedule, kind)
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Posterior mean of the clean image given `xt` at `alpha_bar = ab`.
    pub fn posterior_mean(&self, xt: &[f64], ab: f64) -> Result<Vec<f64>> {
        let m = |i: usize| {
            if self.mean.len() == 1 {
                self.mean[0]
            } else {
                self.mean[i]
            }
        };
        if self.mean.len() != 1 && self.mean.len() != xt.len() {
            return Err(Error::shape(&[self.mean.len()], &[xt.len()]));
        }
        let s2 = self.variance;
        let a = ab.sqrt();
        let denom = ab * s2 + 1.0 - ab;
        Ok(xt
            .iter()
            .enumerate()
            .map(|(i, x)| (a * s2 * x + (1.0 - ab) * m(i)) / denom)
            .collect())
    }
}

pub fn oracle_predict(o: &GaussianOracle, xt: &[f64], t: usize) -> Result<Vec<f64>> {
    let ab = o.schedule.ab(t)?;
    let x0 = o.posterior_mean(xt, ab)?;
    if o.kind == PredictionKind::Sample {
        return Ok(x0);
    }
    let eps = eps_from_x0(&x0, xt, ab);
    make_target(o.kind, &x0, &eps, ab)
}

impl Denoiser for GaussianOracle {
    fn kind(&self) -> PredictionKind {
        self.kind
    }

    fn predict(&self, xt: &[f64], dims: [usize; 3], t: usize) -> Result<Vec<f64>> {
        let n: usize = dims.iter().product();
        if xt.len() != n {
            return Err(Error::shape(&dims, &[xt.len()]));
        }
        oracle_predict(self, xt, t)
    }
}
