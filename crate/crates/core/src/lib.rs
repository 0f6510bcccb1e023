//! Adversarial attacks on event-camera classifiers through a differentiable
//! event-to-grid representation.
//!
//! The pipeline is: event streams ([`events`], [`codec`], [`synth`]) →
//! kernel-weighted grids ([`kernel`], [`grid`]) → a small CNN ([`net`]) →
//! timestamp-shifting and event-generating attacks ([`attack`]) → experiment
//! drivers ([`experiment`]).

// Range checks are written `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod codec;
pub mod dataset;
pub mod error;
pub mod events;
pub mod experiment;
pub mod grid;
pub mod kernel;
pub mod net;
pub mod optim;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
pub use events::{
    enforce_min_resolution, halve_frequency, normalize_times, Event, EventStream, Polarity, TimeState,
};
pub use grid::{represent, represent_backward, GridSpec, GridTensor, Projection};
pub use kernel::{KernelKind, KernelParams, MlpKernel};
pub use net::{Classifier, Sample, TrainConfig};
