//! Coupled-autoencoder cross-domain recommenders for cold-start entities.

pub mod cacdr;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod lfacdr;
pub mod numerics;
pub mod seed;
pub mod train;

pub use config::{StageConfig, TrainConfig};
pub use error::{Error, Result};
