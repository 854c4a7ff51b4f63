//! Model files: one line of JSON metadata, a newline, then the parameters
//! as little-endian `f32` in declaration order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::unet::{TinyUNet, UNetConfig};
use super::{Denoiser, GaussianOracle};
use crate::error::{Error, Result};
use crate::param::PredictionKind;
use crate::schedule::{NoiseSchedule, ScheduleParams};

/// What the parameter blob encodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum ModelSpec {
    TinyUnet {
        widths: Vec<usize>,
        temb_dim: usize,
        norm_groups: usize,
    },
    /// The blob holds the mean (one value, or one per voxel); the variance
    /// lives in the header.
    GaussianOracle { variance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    #[serde(flatten)]
    pub model: ModelSpec,
    pub kind: PredictionKind,
    pub schedule: ScheduleParams,
    /// Last completed training epoch; zero for untrained models.
    pub epoch: usize,
    pub ema_momentum: f64,
    pub param_count: usize,
}

impl WeightsHeader {
    pub fn for_unet(net: &TinyUNet, schedule: &NoiseSchedule, epoch: usize, ema_momentum: f64) -> Self {
        let c = net.config();
        Self {
            model: ModelSpec::TinyUnet {
                widths: c.widths.clone(),
                temb_dim: c.temb_dim,
                norm_groups: c.norm_groups,
            },
            kind: net.kind(),
            schedule: schedule.params(),
            epoch,
            ema_momentum,
            param_count: net.param_count(),
        }
    }

    pub fn for_oracle(o: &GaussianOracle) -> Self {
        Self {
            model: ModelSpec::GaussianOracle { variance: o.variance() },
            kind: o.kind(),
            schedule: o.schedule().params(),
            epoch: 0,
            ema_momentum: 0.0,
            param_count: o.mean().len(),
        }
    }
}

/// A deserialized model, usable directly as a denoiser.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    UNet {
        header: WeightsHeader,
        net: TinyUNet,
    },
    Oracle {
        header: WeightsHeader,
        oracle: GaussianOracle,
    },
}

impl LoadedModel {
    pub fn header(&self) -> &WeightsHeader {
        match self {
            Self::UNet { header, .. } | Self::Oracle { header, .. } => header,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.header().schedule.build()
    }
}

impl Denoiser for LoadedModel {
    fn kind(&self) -> PredictionKind {
        self.header().kind
    }

    fn predict(&self, xt: &[f64], dims: [usize; 3], t: usize) -> Result<Vec<f64>> {
        match self {
            Self::UNet { net, .. } => net.predict(xt, dims, t),
            Self::Oracle { oracle, .. } => oracle.predict(xt, dims, t),
        }
    }
}

pub fn encode_model(header: &WeightsHeader, params: &[f64]) -> Result<Vec<u8>> {
    if header.param_count != params.len() {
        return Err(Error::DimensionMismatch(header.param_count, params.len()));
    }
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    out.reserve(params.len() * 4);
    for &p in params {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<LoadedModel> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or(Error::Malformed {
        what: "weights file",
        detail: "missing header line".into(),
    })?;
    let header: WeightsHeader = serde_json::from_slice(&bytes[..nl])?;
    let blob = &bytes[nl + 1..];
    let needed = header.param_count * 4;
    if blob.len() < needed {
        return Err(Error::TruncatedFile {
            needed: needed + nl + 1,
            have: bytes.len(),
        });
    }
    if blob.len() > needed {
        return Err(Error::Malformed {
            what: "weights file",
            detail: format!("{} trailing bytes after parameters", blob.len() - needed),
        });
    }
    let params: Vec<f64> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let schedule = header.schedule.build()?;
    match &header.model {
        ModelSpec::TinyUnet {
            widths,
            temb_dim,
            norm_groups,
        } => {
            let config = UNetConfig {
                widths: widths.clone(),
                temb_dim: *temb_dim,
                norm_groups: *norm_groups,
            };
            let net = TinyUNet::zeros(config, header.kind)?.with_params(&params)?;
            Ok(LoadedModel::UNet { header, net })
        }
        ModelSpec::GaussianOracle { variance } => {
            if params.is_empty() || !(*variance >= 0.0) {
                return Err(Error::Malformed {
                    what: "weights file",
                    detail: "oracle needs a mean and a nonnegative variance".into(),
                });
            }
            let oracle = GaussianOracle::new(params, *variance, schedule, header.kind);
            Ok(LoadedModel::Oracle { header, oracle })
        }
    }
}

pub fn save_model(path: &Path, header: &WeightsHeader, params: &[f64]) -> Result<()> {
    let bytes = encode_model(header, params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
