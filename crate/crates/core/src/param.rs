//! Training targets for the three prediction kinds and the inversions that
//! turn any network prediction back into clean-image and noise estimates.
//!
//! With `a = sqrt(ab)` and `b = sqrt(1 - ab)` the forward process is
//! `xt = a*x0 + b*eps`, and the targets are
//!
//! * sample:   `x0`
//! * velocity: `a*eps - b*x0`
//! * flow:     `eps - x0`

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionKind {
    Sample,
    Velocity,
    Flow,
}

impl PredictionKind {
    pub const ALL: [PredictionKind; 3] = [Self::Sample, Self::Velocity, Self::Flow];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sample => "sample",
            Self::Velocity => "velocity",
            Self::Flow => "flow",
        }
    }
}

impl fmt::Display for PredictionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PredictionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(Self::Sample),
            "velocity" => Ok(Self::Velocity),
            "flow" => Ok(Self::Flow),
            other => Err(Error::InvalidParameter(format!("unknown prediction kind {other:?}"))),
        }
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(&[a.len()], &[b.len()]));
    }
    Ok(())
}

fn check_ab(ab: f64) -> Result<()> {
    if !(ab > 0.0 && ab < 1.0) {
        return Err(Error::DegenerateAlphaBar(ab));
    }
    Ok(())
}

fn coefficients(ab: f64) -> (f64, f64) {
    (ab.sqrt(), (1.0 - ab).sqrt())
}

pub fn forward_diffuse(x0: &[f64], eps: &[f64], ab: f64) -> Result<Vec<f64>> {
    check_len(x0, eps)?;
    check_ab(ab)?;
    let (a, b) = coefficients(ab);
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

pub fn make_target(kind: PredictionKind, x0: &[f64], eps: &[f64], ab: f64) -> Result<Vec<f64>> {
    check_len(x0, eps)?;
    check_ab(ab)?;
    let (a, b) = coefficients(ab);
    let out = match kind {
        PredictionKind::Sample => x0.to_vec(),
        PredictionKind::Velocity => x0.iter().zip(eps).map(|(x, e)| a * e - b * x).collect(),
        PredictionKind::Flow => x0.iter().zip(eps).map(|(x, e)| e - x).collect(),
    };
    Ok(out)
}

/// Clean-image estimate implied by a prediction of the given kind.
pub fn predict_x0(kind: PredictionKind, pred: &[f64], xt: &[f64], ab: f64) -> Result<Vec<f64>> {
    check_len(pred, xt)?;
    check_ab(ab)?;
    let (a, b) = coefficients(ab);
    let out = match kind {
        PredictionKind::Sample => pred.to_vec(),
        PredictionKind::Velocity => pred.iter().zip(xt).map(|(p, x)| a * x - b * p).collect(),
        PredictionKind::Flow => {
            // Solves {xt = a*x0 + b*eps, pred = eps - x0} for x0.
            let denom = a + b;
            assert!(denom > f64::MIN_POSITIVE, "a + b underflowed for ab={ab}");
            pred.iter().zip(xt).map(|(p, x)| (x - b * p) / denom).collect()
        }
    };
    Ok(out)
}

/// Noise estimate implied by a prediction of the given kind.
pub fn predict_eps(kind: PredictionKind, pred: &[f64], xt: &[f64], ab: f64) -> Result<Vec<f64>> {
    check_len(pred, xt)?;
    check_ab(ab)?;
    let (a, b) = coefficients(ab);
    if b <= f64::MIN_POSITIVE {
        return Err(Error::DegenerateAlphaBar(ab));
    }
    match kind {
        PredictionKind::Velocity => Ok(pred.iter().zip(xt).map(|(p, x)| a * p + b * x).collect()),
        _ => {
            let x0 = predict_x0(kind, pred, xt, ab)?;
            Ok(eps_from_x0(&x0, xt, ab))
        }
    }
}

/// `(xt - sqrt(ab)*x0) / sqrt(1 - ab)`, the generic route to the noise
/// estimate. Callers guarantee matching lengths and `ab` in (0, 1).
pub(crate) fn eps_from_x0(x0: &[f64], xt: &[f64], ab: f64) -> Vec<f64> {
    let (a, b) = coefficients(ab);
    x0.iter().zip(xt).map(|(x0, x)| (x - a * x0) / b).collect()
}

/// Mean squared error over all elements. `kind` is carried for symmetry with
/// the target constructor; every kind uses the same unweighted loss.
pub fn training_loss(_kind: PredictionKind, pred: &[f64], target: &[f64]) -> Result<f64> {
    check_len(pred, target)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

/// Gradient of [`training_loss`] with respect to `pred`.
pub fn training_loss_grad(pred: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    check_len(pred, target)?;
    let scale = 2.0 / pred.len().max(1) as f64;
    Ok(pred.iter().zip(target).map(|(p, t)| scale * (p - t)).collect())
}
