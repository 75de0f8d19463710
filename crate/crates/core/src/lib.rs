//! Commonsense validation, explanation and reason generation.
//!
//! Three pipelines share a small set of model interfaces:
//!
//! - statement-pair validation, either by masked-token pseudo-likelihood
//!   ([`plausibility`]), by a pair classifier over the concatenated pair, or by
//!   scoring each statement separately as a two-way multiple choice ([`choice`]);
//! - explanation selection, scoring the nonsense statement joined with each of
//!   three candidate reasons ([`choice`]);
//! - reason generation by autoregressive decoding, plus the identity baseline,
//!   evaluated with corpus BLEU ([`generation`], [`metrics`]).
//!
//! Every interface in [`backends`] has a deterministic count-based
//! implementation, so each pipeline can be checked by hand. Neural models plug
//! in through the same traits or over the line-delimited JSON protocol in
//! [`backends::service`].

pub mod backends;
pub mod choice;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod generation;
pub mod metrics;
pub mod plausibility;
pub mod training;

pub use error::{Error, Result};
