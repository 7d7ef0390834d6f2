//! Retrieval-augmented comment generation for Bash commands.
//!
//! A transformer encoder is first trained as the encoder half of a plain
//! code-to-comment model. Its hidden states then drive exemplar retrieval
//! (Euclidean top-k over pooled vectors, re-ranked by token edit distance),
//! and a fusion layer merges the target and exemplar representations before
//! a transformer decoder produces the comment.

pub mod autograd;
pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod layers;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod retrieval;
pub mod synth;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
