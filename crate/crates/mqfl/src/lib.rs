//! Simulator for multimodal quantum federated learning experiments.
//!
//! The crate is layered bottom-up: [`qstate`] provides exact dense
//! statevector simulation, [`circuits`] builds the parameterized programs
//! and noise channels, [`autodiff`] supplies parameter-shift gradients and
//! optimizers, [`model`] assembles per-modality encoders with an entangling
//! fusion stage, [`data`] generates and serializes multimodal datasets,
//! [`federation`] runs weighted-averaging training rounds, and
//! [`experiment`]/[`config`] drive reproducible runs from JSON configs.

pub mod autodiff;
pub mod circuits;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod model;
pub mod qstate;
pub mod seeds;

pub use error::{Error, Result};
