//! Density-ratio estimation under Bregman divergences and adversarial
//! generative training built on it.
//!
//! - [`fgen`]: f-divergence generators (α and power families) and their derivatives.
//! - [`net`]: small dense networks with exact reverse-mode gradients, plus Adam.
//! - [`ratio`]: the D-step: fitting a ratio network, and divergence estimates from it.
//! - [`gan`]: the G-step and the alternating training loop with diagnostics.
//! - [`data`]: synthetic distributions, samplers and closed-form oracles.

pub mod data;
pub mod error;
pub mod fgen;
pub mod gan;
pub mod net;
pub mod ratio;

pub use data::{DataSource, DiscretePair, DistSpec, Gaussian};
pub use error::{Error, Result};
pub use fgen::FGen;
pub use gan::{GStepVariant, GeneratorModel, StabilityFlag, TrainConfig, TrainLogRecord, TrainOutcome, Trainer};
pub use net::{Activation, Adam, AdamConfig, Batch, Mlp};
pub use ratio::{DensityRatio, RatioModel, RatioTable, relative_mse};
