//! Vocabulary expansion for over-fragmented languages.
//!
//! The crate covers the whole expansion loop short of model training:
//! byte-level BPE with priority added items ([`bpe`]), fragmentation and
//! efficiency metrics ([`metrics`]), candidate generation ([`candidates`]),
//! detokenization verdicts over model traces ([`detok`]), embedding
//! initialization including Procrustes-mapped hidden states ([`embed`]) and
//! experiment orchestration with Pareto analysis ([`pipeline`]).

pub mod bpe;
pub mod candidates;
pub mod corpus;
pub mod detok;
pub mod embed;
pub mod pipeline;
pub mod metrics;
pub mod error;
pub mod fsutil;

pub use error::{Error, Result};
