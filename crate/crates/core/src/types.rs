//! Core domain types: documents, retrieval contexts, search paths, and the
//! rewritten-request unit produced by the pipeline.
//!
//! These are plain value types with no algorithms attached; every other
//! module builds on them. All of them serialize to JSON and round-trip
//! losslessly.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of a unique document (or chunk) in the corpus.
///
/// Ids are engine-assigned integers; mapping from external string ids is
/// handled by the workload module's interner so comparisons stay cheap in
/// hot paths.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct DocId(pub u64);

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u64> for DocId {
    fn from(id: u64) -> Self {
        DocId(id)
    }
}

/// The ordered list of documents retrieved for one request, with per-document
/// token counts. Order reflects retrieval relevance, most relevant first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    /// Retrieved documents in relevance order; no duplicates.
    pub docs: Vec<DocId>,
    /// Token count per document; every entry of `docs` must be present.
    pub token_counts: BTreeMap<DocId, u64>,
    /// Opaque session identifier.
    pub session_id: String,
    /// Turn number within the session; 0 is the first turn.
    pub turn: u32,
}

impl Context {
    /// Builds a context and checks its invariants.
    pub fn new(
        docs: Vec<DocId>,
        token_counts: BTreeMap<DocId, u64>,
        session_id: impl Into<String>,
        turn: u32,
    ) -> Result<Self> {
        let ctx = Context {
            docs,
            token_counts,
            session_id: session_id.into(),
            turn,
        };
        ctx.validate()?;
        Ok(ctx)
    }

    /// Convenience constructor assigning the same token count to every doc.
    pub fn with_uniform_tokens(
        docs: Vec<DocId>,
        tokens_per_doc: u64,
        session_id: impl Into<String>,
        turn: u32,
    ) -> Result<Self> {
        let counts = docs.iter().map(|d| (*d, tokens_per_doc)).collect();
        Context::new(docs, counts, session_id, turn)
    }

    /// Checks the structural invariants: non-empty, duplicate-free, and a
    /// positive token count for every document.
    pub fn validate(&self) -> Result<()> {
        if self.docs.is_empty() {
            return Err(Error::EmptyContext);
        }
        let mut seen = std::collections::HashSet::with_capacity(self.docs.len());
        for doc in &self.docs {
            if !seen.insert(*doc) {
                return Err(Error::DuplicateDoc(*doc));
            }
            match self.token_counts.get(doc) {
                None => return Err(Error::MissingTokenCount(*doc)),
                Some(0) => return Err(Error::NonPositiveTokenCount(*doc)),
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Total token count over all documents.
    pub fn total_tokens(&self) -> u64 {
        self.docs
            .iter()
            .map(|d| self.token_counts.get(d).copied().unwrap_or(0))
            .sum()
    }

    /// 0-based position of each document in retrieval order.
    pub fn positions(&self) -> std::collections::HashMap<DocId, usize> {
        self.docs.iter().enumerate().map(|(i, d)| (*d, i)).collect()
    }
}

/// Sequence of child indices from the index root to a node.
///
/// A path is only meaningful against a specific tree snapshot; structural
/// mutations can invalidate previously recorded paths.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SearchPath {
    pub steps: Vec<usize>,
}

impl SearchPath {
    pub fn root() -> Self {
        SearchPath { steps: Vec::new() }
    }

    pub fn from_steps(steps: Vec<usize>) -> Self {
        SearchPath { steps }
    }

    pub fn is_root(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn first(&self) -> Option<usize> {
        self.steps.first().copied()
    }

    /// Returns this path extended by one child index.
    pub fn child(&self, idx: usize) -> SearchPath {
        let mut steps = self.steps.clone();
        steps.push(idx);
        SearchPath { steps }
    }
}

impl fmt::Display for SearchPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, s) in self.steps.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{s}")?;
        }
        write!(f, "]")
    }
}

/// A document that was dropped from the current turn because a prior turn of
/// the same session already carried it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupRef {
    pub doc: DocId,
    /// Turn in which the document first appeared.
    pub turn: u32,
}

/// Output unit of the rewrite pipeline: the documents to prefill this turn,
/// references replaced by location hints, rendered hint strings, and the
/// index path recorded during ordering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewrittenRequest {
    /// The context exactly as retrieved.
    pub original: Context,
    /// Documents to prefill this turn, post-ordering and post-dedup.
    pub ordered_docs: Vec<DocId>,
    /// Documents removed this turn, with the turn of their first appearance.
    pub dedup_refs: Vec<DedupRef>,
    /// Rendered order hint, present when ordering changed the retrieval order.
    pub order_hint: Option<String>,
    /// Rendered location hints, one per entry of `dedup_refs`.
    pub location_hints: Vec<String>,
    /// Index path found or created while processing this request.
    pub path: SearchPath,
}

impl RewrittenRequest {
    /// Conservation check: no document is lost or invented by rewriting.
    /// `ordered_docs` and the dedup'd docs together must be exactly the
    /// original docs, and `ordered_docs` must be duplicate-free.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for doc in &self.ordered_docs {
            if !seen.insert(*doc) {
                return Err(Error::DuplicateDoc(*doc));
            }
        }
        let mut combined: Vec<DocId> = self.ordered_docs.clone();
        combined.extend(self.dedup_refs.iter().map(|r| r.doc));
        let mut original = self.original.docs.clone();
        combined.sort_unstable();
        original.sort_unstable();
        if combined != original {
            return Err(Error::Config(format!(
                "rewritten request for session {:?} turn {} does not conserve documents",
                self.original.session_id, self.original.turn
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(docs: &[u64]) -> Context {
        Context::with_uniform_tokens(docs.iter().map(|d| DocId(*d)).collect(), 1024, "s0", 0)
            .unwrap()
    }

    #[test]
    fn context_rejects_duplicates() {
        let err = Context::with_uniform_tokens(vec![DocId(1), DocId(2), DocId(1)], 8, "s", 0)
            .unwrap_err();
        assert!(matches!(err, Error::DuplicateDoc(DocId(1))));
    }

    #[test]
    fn context_rejects_missing_token_count() {
        let mut counts = BTreeMap::new();
        counts.insert(DocId(1), 10);
        let err = Context::new(vec![DocId(1), DocId(2)], counts, "s", 0).unwrap_err();
        assert!(matches!(err, Error::MissingTokenCount(DocId(2))));
    }

    #[test]
    fn context_rejects_zero_token_count() {
        let mut counts = BTreeMap::new();
        counts.insert(DocId(1), 0);
        let err = Context::new(vec![DocId(1)], counts, "s", 0).unwrap_err();
        assert!(matches!(err, Error::NonPositiveTokenCount(DocId(1))));
    }

    #[test]
    fn empty_context_rejected() {
        let err = Context::with_uniform_tokens(vec![], 8, "s", 0).unwrap_err();
        assert!(matches!(err, Error::EmptyContext));
    }

    #[test]
    fn rewritten_request_conservation() {
        let original = ctx(&[1, 5, 2]);
        let ok = RewrittenRequest {
            original: original.clone(),
            ordered_docs: vec![DocId(5)],
            dedup_refs: vec![
                DedupRef {
                    doc: DocId(1),
                    turn: 0,
                },
                DedupRef {
                    doc: DocId(2),
                    turn: 0,
                },
            ],
            order_hint: None,
            location_hints: vec![],
            path: SearchPath::root(),
        };
        ok.validate().unwrap();

        let lossy = RewrittenRequest {
            ordered_docs: vec![DocId(5)],
            dedup_refs: vec![DedupRef {
                doc: DocId(1),
                turn: 0,
            }],
            ..ok.clone()
        };
        assert!(lossy.validate().is_err());

        let invented = RewrittenRequest {
            ordered_docs: vec![DocId(5), DocId(9)],
            ..ok
        };
        assert!(invented.validate().is_err());
    }

    #[test]
    fn serde_round_trip_core_types() {
        let c = ctx(&[3, 1, 7]);
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<Context>(&json).unwrap(), c);

        let p = SearchPath::from_steps(vec![0, 0, 2]);
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, "[0,0,2]");
        assert_eq!(serde_json::from_str::<SearchPath>(&json).unwrap(), p);

        let r = RewrittenRequest {
            original: c,
            ordered_docs: vec![DocId(1), DocId(3), DocId(7)],
            dedup_refs: vec![],
            order_hint: Some("hint".into()),
            location_hints: vec![],
            path: p,
        };
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<RewrittenRequest>(&json).unwrap(), r);
    }
}
