//! Hyperparameters shared by both methods.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Activation;

/// Epoch count and optimizer settings for one training stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl StageConfig {
    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("{name} lr must be > 0, got {}", self.lr)));
        }
        if !(self.l2 >= 0.0) || !self.l2.is_finite() {
            return Err(Error::Config(format!("{name} l2 must be >= 0, got {}", self.l2)));
        }
        Ok(())
    }
}

/// Everything needed to build and train a CACDR or LFACDR model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Encoder widths after the input; the last entry is the latent width `k`.
    /// Decoders mirror them.
    pub encoder_layers: Vec<usize>,
    /// Hidden widths of the `k → … → k` mapper.
    pub mapper_hidden: Vec<usize>,
    pub batch_size: usize,
    pub init: StageConfig,
    pub coupled: StageConfig,
    /// Weight of the bilinear rating term (LFACDR only).
    pub lambda: f64,
    /// Activation of the last layer of every network; ReLU elsewhere.
    pub output_activation: Activation,
    pub seed: u64,
}

pub type CacdrConfig = TrainConfig;
pub type LfacdrConfig = TrainConfig;

impl TrainConfig {
    /// `{256, 128, 64, 64, 128, 256}` autoencoders, `64 → 128 → 64` mapper, batch 32.
    pub fn cacdr_defaults() -> Self {
        Self {
            encoder_layers: vec![256, 128, 64],
            mapper_hidden: vec![128],
            batch_size: 32,
            init: StageConfig {
                epochs: 250,
                lr: 1e-3,
                l2: 1e-5,
            },
            coupled: StageConfig {
                epochs: 300,
                lr: 1e-5,
                l2: 1e-5,
            },
            lambda: 1.0,
            output_activation: Activation::Relu,
            seed: 0,
        }
    }

    /// `{512, 256, 128, 128, 256, 512}` autoencoders, `128 → 256 → 128` mapper, batch 500.
    pub fn lfacdr_defaults() -> Self {
        Self {
            encoder_layers: vec![512, 256, 128],
            mapper_hidden: vec![256],
            batch_size: 500,
            ..Self::cacdr_defaults()
        }
    }

    pub fn latent_dim(&self) -> usize {
        *self.encoder_layers.last().expect("validated non-empty")
    }

    /// Replaces the latent width, keeping the hidden encoder widths.
    pub fn with_latent_dim(mut self, k: usize) -> Self {
        if let Some(last) = self.encoder_layers.last_mut() {
            *last = k;
        }
        self
    }

    /// `[input, e1, ..., k]`.
    pub fn encoder_sizes(&self, input: usize) -> Vec<usize> {
        std::iter::once(input).chain(self.encoder_layers.iter().copied()).collect()
    }

    /// `[k, ..., e1, output]`.
    pub fn decoder_sizes(&self, output: usize) -> Vec<usize> {
        self.encoder_layers
            .iter()
            .rev()
            .copied()
            .chain(std::iter::once(output))
            .collect()
    }

    /// `[k, h1, ..., k]`.
    pub fn mapper_sizes(&self) -> Vec<usize> {
        let k = self.latent_dim();
        std::iter::once(k)
            .chain(self.mapper_hidden.iter().copied())
            .chain(std::iter::once(k))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_layers.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.encoder_layers.contains(&0) || self.mapper_hidden.contains(&0) {
            return Err(Error::Config("layer sizes must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        self.init.validate("init")?;
        self.coupled.validate("coupled")
    }
}
