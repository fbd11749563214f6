//! Deterministic fine-tuning: prompt templating, seeded epoch-cyclic batching,
//! AdamW on adapter parameters only, gradient clipping, and the binary
//! checkpoint format.

mod adamw;
mod checkpoint;
mod format;
mod loop_;

pub use adamw::{clip_global_norm, AdamW, AdamWConfig};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointError, Kind, LoadedCheckpoint, CHECKPOINT_MAGIC,
    FORMAT_VERSION,
};
pub use format::{format_example, FormattedExample, DEFAULT_TEMPLATE_ID};
pub use loop_::{train, write_loss_csv};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;

/// Independent, reproducible randomness lanes derived from one user seed.
/// Keeping the lanes on separate ChaCha streams means adapter initialization,
/// batch shuffling, and dropout masks never perturb one another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RngStream {
    AdapterInit = 0,
    Shuffle = 1,
    Dropout = 2,
}

/// A ChaCha8 RNG seeded by `seed` on the given stream.
pub fn seeded_rng(seed: u64, stream: RngStream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Hyperparameters for the fine-tuning loop. Constant learning rate, no
/// schedule; weight decay applies to adapter parameters (default off).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub grad_clip_norm: f32,
    pub seed: u64,
    pub max_seq_len: usize,
    pub template_id: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2.5e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            steps: 200,
            batch_size: 8,
            grad_clip_norm: 1.0,
            seed: 42,
            max_seq_len: 512,
            template_id: DEFAULT_TEMPLATE_ID.to_string(),
        }
    }
}

impl TrainConfig {
    /// Checks structural validity. A zero learning rate is permitted as the
    /// documented no-op limit; negative or non-finite values are not.
    pub fn validate(&self) -> Result<(), TrainError> {
        let complain = |msg: &str| Err(TrainError::InvalidConfig(msg.to_string()));
        if self.steps == 0 {
            return complain("steps must be at least 1");
        }
        if self.batch_size == 0 {
            return complain("batch_size must be at least 1");
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return complain("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return complain("betas must lie in [0, 1)");
        }
        if !self.eps.is_finite() || self.eps <= 0.0 {
            return complain("eps must be a positive finite value");
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return complain("weight_decay must be finite and non-negative");
        }
        if !self.grad_clip_norm.is_finite() || self.grad_clip_norm <= 0.0 {
            return complain("grad_clip_norm must be a positive finite value");
        }
        if self.max_seq_len < 2 {
            return complain("max_seq_len must be at least 2");
        }
        Ok(())
    }
}

/// Errors raised by example formatting and the training loop.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("model has no trainable parameters; inject adapters before training")]
    NoTrainableParameters,
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown template id '{0}'")]
    UnknownTemplate(String),
    #[error(
        "question too long: the prompt alone occupies {prompt_len} of {max_seq_len} positions"
    )]
    QuestionTooLong { prompt_len: usize, max_seq_len: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}
