//! Uncertainty-gated, dual-path retrieval-augmented generation.
//!
//! A query is first answered from the generator's parametric knowledge. If
//! the normalized negative log-likelihood of that answer exceeds a threshold,
//! the engine generates a pseudo-context passage, retrieves top-`n` chunks
//! from both the query and the pseudo-context embeddings, rescores the union
//! by the joint angle to both, and answers from the best `k`.
//!
//! Module map:
//! - [`corpus`]: corpus and query-set files
//! - [`embed`]: embedders and the persistent embedding cache
//! - [`index`]: exact inner-product search
//! - [`generate`]: generator backends, prompt templates, generation cache
//! - [`uncertainty`]: uncertainty score and trigger decision
//! - [`select`]: dual-path retrieval and joint rescoring
//! - [`pipeline`]: per-query orchestration of every comparison mode
//! - [`eval`]: EM/F1, recall@k, threshold sweeps, gold-rank histograms

pub mod config;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod generate;
pub mod http;
pub mod index;
pub mod pipeline;
pub mod select;
pub mod uncertainty;

pub use error::{Error, ErrorCategory, Result};
