//! Contextual hints and prompt assembly.
//!
//! Reordering documents for cache reuse hides the retriever's relevance
//! ranking, and de-duplication removes documents the model would otherwise
//! see again; both are repaired with short textual hints. An *order hint*
//! restates the original priority order right before the question. A
//! *location hint* stands where a removed document used to be and points the
//! model at its earlier occurrence in the conversation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DocId, RewrittenRequest};

/// Maps a document id to its display label inside prompts.
pub type Labeler<'a> = &'a dyn Fn(DocId) -> String;

/// Default label: `[Doc_<id>]`.
pub fn default_label(doc: DocId) -> String {
    format!("[Doc_{}]", doc.0)
}

/// Renders the order hint restating the original retrieval priority.
pub fn render_order_hint(original_order: &[DocId], labeler: Labeler<'_>) -> Result<String> {
    if original_order.is_empty() {
        return Err(Error::BadHintInput);
    }
    let mut seen = std::collections::HashSet::new();
    if !original_order.iter().all(|d| seen.insert(*d)) {
        return Err(Error::BadHintInput);
    }
    let labels: Vec<String> = original_order.iter().map(|d| labeler(*d)).collect();
    Ok(format!(
        "Please read the context in the following priority order: {} and answer the question.",
        labels.join(" > ")
    ))
}

/// Renders the location hint for a de-duplicated document.
pub fn render_location_hint(doc: DocId, labeler: Labeler<'_>) -> String {
    format!(
        "Please refer to {} in the previous conversation",
        labeler(doc)
    )
}

/// One element of an assembled prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    SystemPrompt { text: String },
    HistoryTurn { text: String },
    DocRef { doc: DocId },
    OrderHint { text: String },
    LocationHint { text: String, doc: DocId },
    Question { text: String },
}

/// A fully assembled prompt: history, documents and hints, then the
/// question. Serializes to structured JSON or to plain text with blank
/// lines between segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct PromptLayout {
    pub segments: Vec<Segment>,
}

impl PromptLayout {
    /// Plain-text rendering; document references render as their labels.
    pub fn to_text(&self, labeler: Labeler<'_>) -> String {
        let parts: Vec<String> = self
            .segments
            .iter()
            .map(|s| match s {
                Segment::SystemPrompt { text }
                | Segment::HistoryTurn { text }
                | Segment::OrderHint { text }
                | Segment::Question { text } => text.clone(),
                Segment::LocationHint { text, .. } => text.clone(),
                Segment::DocRef { doc } => labeler(*doc),
            })
            .collect();
        parts.join("\n\n")
    }
}

/// Assembles the prompt layout for one rewritten request.
///
/// History comes first, then the per-turn interleave: when documents were
/// de-duplicated, each location hint occupies the position its document held
/// in the retrieval order and the surviving documents keep their slots;
/// otherwise the documents appear in their (possibly reordered) prefill
/// order. An order hint is added immediately before the question when the
/// final order differs from the retrieval order; `with_order_hint` gates it.
pub fn assemble(
    req: &RewrittenRequest,
    question: &str,
    history: &[String],
    system_prompt: Option<&str>,
    with_order_hint: bool,
) -> PromptLayout {
    let mut segments = Vec::new();
    if let Some(text) = system_prompt {
        segments.push(Segment::SystemPrompt { text: text.into() });
    }
    for turn in history {
        segments.push(Segment::HistoryTurn { text: turn.clone() });
    }

    if req.dedup_refs.is_empty() {
        for doc in &req.ordered_docs {
            segments.push(Segment::DocRef { doc: *doc });
        }
    } else {
        // Walk the retrieval order; removed docs become location hints in
        // place, surviving docs stay where they were.
        let mut hint_of: std::collections::HashMap<DocId, &str> = std::collections::HashMap::new();
        for (r, text) in req.dedup_refs.iter().zip(req.location_hints.iter()) {
            hint_of.insert(r.doc, text.as_str());
        }
        for doc in &req.original.docs {
            match hint_of.get(doc) {
                Some(text) => segments.push(Segment::LocationHint {
                    text: (*text).to_string(),
                    doc: *doc,
                }),
                None => segments.push(Segment::DocRef { doc: *doc }),
            }
        }
    }

    if with_order_hint {
        if let Some(text) = &req.order_hint {
            segments.push(Segment::OrderHint { text: text.clone() });
        }
    }
    segments.push(Segment::Question {
        text: question.into(),
    });
    PromptLayout { segments }
}
