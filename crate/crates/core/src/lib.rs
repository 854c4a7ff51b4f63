//! Volumetric diffusion engine for 3D brain MRI.
//!
//! * [`schedule`]: discrete noise schedule and DDIM timestep subsequence
//! * [`param`]: sample / velocity / flow targets and their inversions
//! * [`sampler`]: deterministic DDIM generation
//! * [`denoiser`]: the denoiser interface, a closed-form Gaussian oracle and
//!   a small trainable 3D U-Net with Adam and EMA
//! * [`volume`]: NIfTI I/O, preprocessing and subject-level splits
//! * [`eval`]: Frechet distance, KS permutation testing and nearest-neighbor
//!   memorization search

// Index loops over several parallel arrays read better than zipped iterators,
// and `!(x >= 0.0)` is how NaN gets rejected alongside negatives.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod denoiser;
pub mod error;
pub mod eval;
pub mod param;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod volume;

pub use error::{Error, Result};
pub use param::PredictionKind;
pub use schedule::{NoiseSchedule, ScheduleParams};
pub use volume::Volume;
