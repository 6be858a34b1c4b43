//! Joint target extraction and targeted sentiment classification with a
//! latent sentiment-span CRF.
//!
//! A sentence is scored over a tag lattice whose paths encode targets, their
//! polarities and the (latent) sentiment span each target owns. Edge scores
//! come from a BiLSTM encoder and a self-attention layer; training maximizes
//! the marginal likelihood of the gold targets, summing over span boundaries.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod encoder;
pub mod evaluation;
pub mod error;
pub mod inference;
pub mod lattice;
pub mod nn;
pub mod oracle;
pub mod selfcheck;
pub mod training;

pub use error::{Error, Result};
