//! Decoder-only transformer: pre-RMS-norm blocks with linear-bias attention
//! and SwiGLU feed-forward layers, tied input/output embeddings.

mod alibi;
pub mod checkpoint;
mod config;
mod forward;
mod generate;
mod params;

pub use alibi::{alibi_bias, AlibiBias, AlibiSlopes};
pub use config::{default_d_ff, ModelConfig, FULL_N_LAYERS, FULL_PARAM_TARGET};
pub use forward::{attention_logits, backward, forward, forward_batch, swiglu, ForwardCache};
pub use generate::{
    argmax_among, generate, push_many, push_many_hidden, push_many_selected, token_logit, MaskFn, Session,
};
pub use params::{LayerParams, Parameters, TensorRole, TensorSpec};

use crate::tokenizer::TokenId;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: TokenId, vocab_size: usize },
    #[error("allowed-token mask is empty at step {step}")]
    EmptyMask { step: usize },
    #[error("prompt is empty")]
    EmptyPrompt,
}
