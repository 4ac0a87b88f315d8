//! Classical Chinese language-model toolkit.
//!
//! A character-level decoder-only transformer with linear attention biases and
//! SwiGLU feed-forward blocks, trained by next-token prediction and fine-tuned
//! on four instruction tasks (punctuation, allusion recognition, word
//! explanation, translation). Punctuation is restored by a constrained decoder
//! that can only emit the next source character or a mark, so the source text
//! is always reproduced exactly.
//!
//! The crate also carries the evaluation toolchain (segmentation/punctuation
//! F1, allusion scores, character BLEU and chrF, human-rating aggregation) and
//! the diachronic sense-analysis pipeline.

pub mod decoder;
pub mod human_eval;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod sense;
pub mod sft;
pub mod text;
pub mod tokenizer;
pub mod trainer;
