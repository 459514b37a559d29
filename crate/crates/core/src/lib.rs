//! Knowledge-guided relation networks for few-shot text classification.
//!
//! A task's support sentences are linked to knowledge-base concepts; the mean
//! embedding of those concepts drives a linear generator that emits the
//! parameters of a task-specific relation network. Its score is added to a
//! shared, task-agnostic relation network and squashed by a sigmoid, so
//! similar tasks end up with similar metrics and different tasks with
//! different ones.
//!
//! Module map:
//!
//! * [`numerics`]: dense substrate, two-layer perceptron, Adam, gradient checks
//! * [`kb_embedding`]: triples, bilinear embeddings, margin training, hits@k
//! * [`retrieval`]: mention matching and the knowledge vector
//! * [`encoding`]: sentence encoder, prototypes, pair vectors
//! * [`relation`]: relation networks, the generator, fusion and loss
//! * [`model`]: the assembled scorer with gradients for every block
//! * [`episodes`]: corpus loading and C-way N-shot sampling
//! * [`meta_training`]: training loop, evaluation, variant studies
//! * [`checkpoint`] and [`synth`]: model files and benchmark data
//! * [`cli`]: the `kgmeta` commands
//!
//! The guide in `book/` walks through each piece with runnable snippets.

pub mod checkpoint;
pub mod cli;
pub mod encoding;
pub mod episodes;
pub mod error;
pub mod kb_embedding;
pub mod meta_training;
pub mod model;
pub mod numerics;
pub mod relation;
pub mod retrieval;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
pub use model::Variant;

// Compile and run the guide's snippets with the doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/numerics.md")]
    mod numerics {}
    #[doc = include_str!("../../../book/src/kb-embeddings.md")]
    mod kb_embeddings {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/encoding.md")]
    mod encoding {}
    #[doc = include_str!("../../../book/src/relation-networks.md")]
    mod relation_networks {}
    #[doc = include_str!("../../../book/src/episodes.md")]
    mod episodes {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
