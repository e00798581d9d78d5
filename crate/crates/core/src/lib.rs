//! Context-reuse engine for retrieval-augmented generation serving.
//!
//! RAG requests arrive with an ordered list of retrieved documents. Across
//! concurrent sessions and conversation turns those lists overlap heavily,
//! but prefix caches only reuse KV state for byte-identical prompt prefixes,
//! so most of the overlap is wasted. This crate recovers it:
//!
//! - [`index`] maintains a tree over known contexts mirroring the engine's
//!   prefix cache at document granularity.
//! - [`ordering`] reorders each incoming context to lead with its longest
//!   cached prefix, preserving the retriever's ranking for the remainder.
//! - [`scheduler`] arranges a batch so prefix-sharing requests run
//!   back-to-back, before eviction can undo the sharing.
//! - [`dedup`] drops documents a session has already seen in earlier turns.
//! - [`hints`] renders the short instructions that restore the original
//!   retrieval order and point the model at de-duplicated documents.
//! - [`cache_sim`] is a token-budgeted prefix-cache simulator used to
//!   measure hit rates without a GPU.
//! - [`workload`] generates synthetic traces with controllable overlap and
//!   loads external ones.
//! - [`experiment`] runs end-to-end trace-driven experiments; [`gateway`]
//!   exposes the rewrite pipeline as a line-delimited JSON service.

pub mod cache_sim;
pub mod dedup;
pub mod distance;
pub mod error;
pub mod experiment;
pub mod gateway;
pub mod hints;
pub mod index;
pub mod ordering;
pub mod scheduler;
pub mod types;
pub mod workload;

pub use error::{Error, Result};
pub use types::{Context, DedupRef, DocId, RewrittenRequest, SearchPath};
