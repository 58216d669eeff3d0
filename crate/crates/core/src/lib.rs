//! Embedding-informed adaptive retrieval for question answering.
//!
//! A small classifier reads an early-layer sentence embedding of the question
//! and decides whether to retrieve passages before generating an answer. The
//! crate also ships the labelling pipeline that produces its training data,
//! the baseline routers it is compared against, BM25 retrieval, and the
//! evaluation harness.

pub mod classifier;
pub mod clock;
pub mod config;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod eval;
mod http;
pub mod labeler;
pub mod llm;
pub mod qa;
pub mod retrieval;
pub mod routers;
pub mod stub_world;
pub mod viz;
pub mod wire;

pub use error::{Error, Result};
pub use http::HttpSettings;
