//! Note encoder: relative-position transformer trained by permutation
//! language modeling.

mod checkpoint;
mod config;
mod model;
mod plan;
mod pretrain;

pub(crate) use checkpoint::sha256_hex;
pub use checkpoint::{EncoderCheckpoint, ENCODER_MAGIC};
pub use config::EncoderConfig;
pub use model::{layer_param, ContentPass, DropoutRng, Encoder, LM_BIAS, LM_WEIGHT, MASK_EMB, WORD_EMB};
pub use plan::PermutationPlan;
pub use pretrain::{
    encode_batch, pretrain, smoothed_loss, write_loss_csv, CorpusNote, PretrainConfig, PretrainOutcome,
};

use thiserror::Error;

use crate::container::ContainerError;
use crate::numerics::NumericsError;
use crate::text::TextError;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("encoder config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("empty token sequence")]
    EmptySequence,
    #[error("permutation plan: {0}")]
    PlanInvariant(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },
    #[error("recurrence memory: {0}")]
    Memory(String),
    #[error("pretraining corpus contains {count} holdout notes (first: {first})")]
    Contamination { count: usize, first: u64 },
    #[error("pretraining corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
