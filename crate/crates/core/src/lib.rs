//! Decoupled transformer for open-domain machine reading comprehension.
//!
//! A standard MRC encoder reads `[CLS] question [SEP] passage [SEP]` through
//! every layer at answer time. This crate splits the encoder into an
//! *input-component* (the lower `x` layers, run on the question and on each
//! passage independently) and a *cross-component* (the upper `y` layers, run
//! on the concatenation). Passage outputs of the input-component are computed
//! offline, optionally compressed through a learned linear bottleneck, and
//! stored in a random-access cache, so at answer time only the question pays
//! for the lower layers.
//!
//! The crate is self-contained on the numeric side: a small dense [`Tensor`]
//! type with a reverse-mode [`graph`] on top, an Adam optimizer, and a
//! counter-based RNG so every run is reproducible bit for bit.
//!
//! Module map:
//! - [`tensor`], [`graph`], [`adam`], [`rng`] — numeric core.
//! - [`transformer`] — the standard (joint) encoder used as teacher/baseline.
//! - [`decoupled`] — the split encoder with global position/segment tables.
//! - [`distill`] — the four-term distillation objective and trainers.
//! - [`compression`] — the compress/decompress bottleneck and its two-phase
//!   training procedure.
//! - [`cache`] — the on-disk representation store and storage estimator.
//! - [`pipeline`] — retrieval + reading at answer time, plus the synthetic
//!   key/value task used for desk-scale experiments.
//! - [`analysis`] — FLOPs cost model and the wall-clock benchmark harness.
//! - [`checkpoint`] — binary model serialization.

pub mod adam;
pub mod analysis;
pub mod cache;
pub mod checkpoint;
pub mod compression;
pub mod decoupled;
pub mod distill;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::{Real, Tensor};

/// Reserved token ids shared by the tokenizer-free synthetic task and the
/// input layout helpers. Content tokens start at [`tokens::CONTENT_BASE`].
pub mod tokens {
    pub const PAD: u32 = 0;
    pub const CLS: u32 = 1;
    pub const SEP: u32 = 2;
    pub const CONTENT_BASE: u32 = 3;
}
