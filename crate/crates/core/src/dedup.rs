//! Multi-turn de-duplication: drop documents a session has already carried
//! in earlier turns and replace them with location hints.
//!
//! Session history lives in [`SessionState`], not in the index node, so a
//! conversation keeps de-duplicating even after its cached prefix has been
//! evicted; the caller just sees a cache-miss signal instead of a hit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hints::{default_label, render_location_hint};
use crate::index::{ContextIndex, NodeId};
use crate::ordering::OrderedContext;
use crate::types::{Context, DedupRef, DocId, RewrittenRequest, SearchPath};

/// Per-session history used for cross-turn de-duplication.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    /// Path to the session's context node, recorded at registration.
    pub path: SearchPath,
    /// Stable handle of that node, used to survive sibling renumbering.
    pub node: Option<NodeId>,
    /// First-appearance turn of every document the session has carried.
    pub seen_docs: BTreeMap<DocId, u32>,
    /// Tokens prefilled for this session so far (documents only).
    pub cumulative_tokens: u64,
    /// Next turn to process.
    pub turn: u32,
}

impl SessionState {
    /// Registers a session after its first turn was ordered and prefilled.
    pub fn register(ctx: &Context, ordered: &OrderedContext, node: Option<NodeId>) -> Self {
        let seen_docs = ctx.docs.iter().map(|d| (*d, ctx.turn)).collect();
        SessionState {
            session_id: ctx.session_id.clone(),
            path: ordered.path.clone(),
            node,
            seen_docs,
            cumulative_tokens: ctx.total_tokens(),
            turn: ctx.turn + 1,
        }
    }

    /// Documents of the session's conversation so far, oldest turn first.
    pub fn seen_count(&self) -> usize {
        self.seen_docs.len()
    }
}

/// Result of de-duplicating one turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DedupOutcome {
    pub request: RewrittenRequest,
    /// Whether the session's index node was still alive (its cached prefix
    /// is presumed resident). False after eviction; de-duplication still
    /// applies because the text remains in the conversation history.
    pub cache_resident: bool,
    /// Token count of the documents removed this turn.
    pub saved_tokens: u64,
}

/// Marks the session's index node as multi-turn. Requires a completed first
/// turn; idempotent on repeat calls.
pub fn activate_multi_turn(state: &SessionState, index: &mut ContextIndex) -> Result<()> {
    if state.turn == 0 {
        return Err(Error::SessionNotReady(state.session_id.clone()));
    }
    let node = resolve_node(state, index)?;
    if let Some(id) = node {
        index.set_multi_turn(id, true)?;
    }
    Ok(())
}

/// De-duplicates one retrieval against the session history, rendering
/// location hints with the default `[Doc_<id>]` labels.
pub fn dedup_turn(
    state: &mut SessionState,
    index: &ContextIndex,
    retrieved: &Context,
) -> Result<DedupOutcome> {
    dedup_turn_with(state, index, retrieved, &default_label)
}

/// De-duplicates one retrieval against the session history.
///
/// The retrieved documents are partitioned into seen and novel; novel docs
/// keep their retrieval order and become the turn's prefill, seen docs turn
/// into location hints at their original positions. Runs in O(N) over the
/// retrieved list. The session state advances: novel docs join the history
/// at the current turn and the cumulative token count grows by the novel
/// tokens only.
pub fn dedup_turn_with(
    state: &mut SessionState,
    index: &ContextIndex,
    retrieved: &Context,
    labeler: crate::hints::Labeler<'_>,
) -> Result<DedupOutcome> {
    if state.turn == 0 {
        return Err(Error::SessionNotReady(state.session_id.clone()));
    }
    retrieved.validate()?;

    let resident = match resolve_node_mut(state, index)? {
        Some(id) => index.node(id).map(|n| n.seq_len > 0).unwrap_or(false),
        None => false,
    };

    let turn = state.turn;
    let mut ordered_docs = Vec::new();
    let mut dedup_refs = Vec::new();
    let mut location_hints = Vec::new();
    let mut saved_tokens = 0u64;
    for doc in &retrieved.docs {
        match state.seen_docs.get(doc) {
            Some(first_turn) => {
                dedup_refs.push(DedupRef {
                    doc: *doc,
                    turn: *first_turn,
                });
                location_hints.push(render_location_hint(*doc, labeler));
                saved_tokens += retrieved.token_counts.get(doc).copied().unwrap_or(0);
            }
            None => {
                ordered_docs.push(*doc);
                state.seen_docs.insert(*doc, turn);
                state.cumulative_tokens += retrieved.token_counts.get(doc).copied().unwrap_or(0);
            }
        }
    }
    state.turn += 1;

    let request = RewrittenRequest {
        original: retrieved.clone(),
        ordered_docs,
        dedup_refs,
        order_hint: None,
        location_hints,
        path: state.path.clone(),
    };
    debug_assert!(request.validate().is_ok());
    Ok(DedupOutcome {
        request,
        cache_resident: resident,
        saved_tokens,
    })
}

/// Resolves the session's node. Returns `None` when the node was evicted;
/// a session referencing a node this index never allocated is corrupt and
/// raises an invalid-path error.
fn resolve_node(state: &SessionState, index: &ContextIndex) -> Result<Option<NodeId>> {
    let Some(id) = state.node else {
        return Ok(None); // session was registered without index placement
    };
    if !index.was_allocated(id) {
        return Err(Error::invalid_path(&state.path, "unknown session node"));
    }
    Ok(index.is_alive(id).then_some(id))
}

/// Like [`resolve_node`] but also refreshes a stored path that went stale
/// when sibling eviction renumbered the branch.
fn resolve_node_mut(state: &mut SessionState, index: &ContextIndex) -> Result<Option<NodeId>> {
    let resolved = resolve_node(state, index)?;
    if let Some(id) = resolved {
        let node = index.node(id).expect("resolved node is alive");
        if node.path != state.path {
            state.path = node.path.clone();
        }
    }
    Ok(resolved)
}

/// All sessions known to a gateway or experiment, exportable as JSON.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStore {
    pub sessions: BTreeMap<String, SessionState>,
}

impl SessionStore {
    pub fn new() -> Self {
        SessionStore::default()
    }

    pub fn insert(&mut self, state: SessionState) {
        self.sessions.insert(state.session_id.clone(), state);
    }

    pub fn get(&self, session_id: &str) -> Result<&SessionState> {
        self.sessions
            .get(session_id)
            .ok_or_else(|| Error::UnknownSession(session_id.to_string()))
    }

    pub fn get_mut(&mut self, session_id: &str) -> Result<&mut SessionState> {
        self.sessions
            .get_mut(session_id)
            .ok_or_else(|| Error::UnknownSession(session_id.to_string()))
    }

    pub fn contains(&self, session_id: &str) -> bool {
        self.sessions.contains_key(session_id)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(serde_json::from_str(json)?)
    }
}
