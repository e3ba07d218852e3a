//! Contrastive pretraining and evaluation of spiking neural networks on
//! event-camera data, self-contained on CPU.
//!
//! The pieces, bottom to top:
//!
//! - [`event`]: event streams, file formats, and a synthetic generator
//! - [`repr`]: spatio-temporal histogram / voxel-grid tensors
//! - [`augment`]: stochastic view pairs for contrastive learning
//! - [`autodiff`]: f64 tensors, reverse-mode tape, SGD
//! - [`snn`]: LIF neurons, spiking residual backbones, projection heads
//! - [`contrastive`]: temperature-scaled contrastive losses
//! - [`train`]: pretraining, probing, fine-tuning, few-shot evaluation
//! - [`gradcheck`]: finite-difference validation of the backward pass
//! - [`config`] / [`cli`]: TOML-driven command-line front end
//!
//! Each capability has a runnable demo under `examples/`.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod error;
pub mod event;
pub mod gradcheck;
pub mod repr;
pub mod rng;
pub mod snn;
pub mod train;

pub use error::{Error, Result};
