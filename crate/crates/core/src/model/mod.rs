//! Differentiable hierarchical transformer: local window stack, global stack
//! with grouped-query attention, and a shared prediction head.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod mask;
pub mod network;
pub mod params;
pub mod tape;
pub mod tensor;

use thiserror::Error;

pub use attention::{attention_weights, gqa_attention};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_model, save_model, CheckpointError,
};
pub use config::ModelConfig;
pub use gradcheck::{grad_check, Coverage, GradCheckReport};
pub use mask::{local_sequence_mask, local_window_mask, AttentionMask};
pub use network::{Objective, SeqItem, UnifiedModel, UnifiedSequence};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("sub-window size {sub_size} does not tile a window of {window_len} tokens")]
    Alignment { window_len: usize, sub_size: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("token id {0} is not valid here")]
    InvalidToken(u32),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}
