//! Contrastive reward learning for abstractive summarization.
//!
//! A small attention encoder/decoder is first trained by maximum likelihood,
//! then fine-tuned so that its length-normalized sequence scores agree with a
//! quality metric's ranking of candidate summaries produced by diverse beam
//! search. Three quality metrics are provided: ROUGE, a likelihood score under
//! a frozen scorer model, and an arc-level factuality score.

pub mod cli;
pub mod corpus;
pub mod crl;
pub mod decoding;
pub mod error;
pub mod evaluator;
pub mod metrics;
pub mod model;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
