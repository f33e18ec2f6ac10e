//! Conditional diffusion engine for studying memorization through attraction basins.
//!
//! The engine trains a small conditional noise predictor on synthetic data
//! with duplicated `(condition, sample)` pairs, samples with classifier-free,
//! zero or opposite guidance, and measures how guided trajectories fall into
//! (and escape) the basin around a memorized training point.
//!
//! Module map:
//! - [`schedule`]: noise ladder and forward process
//! - [`model`], [`train`], [`optim`]: the denoiser and its training
//! - [`scenario`]: memorization-inducing datasets
//! - [`guide`]: guided estimates, transition detection
//! - [`sample`]: reverse process and trajectories
//! - [`basin`]: attractor, basin and transition-point probes
//! - [`metrics`]: memorization / alignment / diversity scoring
//! - [`config`], [`harness`]: run configuration and the CLI commands

pub mod basin;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod guide;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod par;
pub mod rng;
pub mod sample;
pub mod scenario;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
pub use guide::{GuidancePolicy, NoisePredictor, PrePhase, SwitchRule};
pub use model::{Architecture, Condition, DenoiserParams};
pub use schedule::{NoiseSchedule, StatePoint};
