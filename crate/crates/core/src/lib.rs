//! Vocabulary expansion for pre-trained decoder-only language models, with
//! new-token embeddings learned by self-distillation.
//!
//! The model is run twice over the same text: once under the original
//! tokenization (teacher, no gradients) and once under the extended
//! tokenization (student). The student's logits are truncated to the original
//! vocabulary, aligned position-by-position with the teacher's, and the new
//! embedding rows are trained to minimise the column-wise KL divergence. New
//! head rows are trained separately with next-token cross-entropy.

pub mod alignment;
pub mod analysis;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod init;
pub mod model;
pub mod pipeline;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
