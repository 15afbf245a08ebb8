//! Source-free unsupervised domain adaptation.
//!
//! A source-trained classifier is adapted to an unlabeled target domain in
//! three steps:
//!
//! 1. [`preadapt`]: neighborhood smoothness pre-adaptation over a memory queue
//!    of target embeddings.
//! 2. [`consolidation`]: top-k prediction hypotheses per instance, gradient
//!    weighted rationale pooling, class-wise rationale centroids, and a
//!    two-threshold rank rule that picks a reliable pseudo-labeled subset.
//! 3. [`ssl`]: FixMatch-style training over the pseudo-labeled and remaining
//!    unlabeled target samples.
//!
//! [`pipeline`] wires the steps together and backs the `sfda` CLI.

pub mod checkpoint;
pub mod consolidation;
pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod preadapt;
pub mod selector;
pub mod ssl;

pub use error::{Error, Result};
