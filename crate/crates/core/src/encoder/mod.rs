//! Desk-scale masked language model: tokenizer, transformer forward pass,
//! pooled and word-in-context representations, pseudo-log-likelihood,
//! reverse-mode gradients and checkpoints.

pub mod checkpoint;
mod model;
pub mod tape;
pub mod tensor;
mod tokenizer;

pub use model::{
    sentence_repr, Adam, Bound, EncoderConfig, EncoderModel, Frozen, POSITION_EMBEDDING,
    TOKEN_EMBEDDING,
};
pub use tape::{ParamGrads, Tape, Var};
pub use tensor::Tensor;
pub use tokenizer::Tokenizer;
