//! signforge: a sequence-to-sequence toolkit for continuous sign pose
//! production.
//!
//! The crate provides two transformer families built on a small reverse-mode
//! autodiff tensor core: a symbolic transformer for discrete-to-discrete
//! translation (text to gloss, and the text decoder of the back-translation
//! model) and a progressive transformer for discrete-to-continuous production
//! with counter decoding. Around them sit anti-drift training augmentations,
//! DTW alignment, BLEU/ROUGE evaluation, a parallel-corpus loader with a
//! synthetic toy-corpus generator, and a training/production/evaluation
//! pipeline with binary checkpoints.

pub mod attention;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;
pub mod pipeline;
pub mod pose2text;
pub mod progressive;
pub mod symbolic;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;

pub use tensor::{Scalar, Tensor, TensorError};
