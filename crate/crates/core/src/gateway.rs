//! Request/response gateway: the rewrite-order-dedup pipeline as a service.
//!
//! The wire protocol is newline-delimited JSON over a TCP stream; every
//! request line gets exactly one reply line, and a malformed line yields a
//! structured error reply without dropping the connection.
//!
//! Three message shapes are accepted:
//!
//! - Rewrite request:
//!   `{"session_id": "u1", "turn": 0, "retrieved": ["2","1","4"],
//!     "doc_tokens": {"2": 1024, ...}, "question": "..."}`
//!   Reply: `{"session_id", "turn", "ordered_docs", "dedup_refs",
//!   "order_hint", "location_hints", "prompt_text"}`.
//! - Prefix-cache notifications from the serving engine, singly or as an
//!   array: `{"type": "evicted", "n_tokens": 4096}`,
//!   `{"type": "appended", "path": [0,0,2], "n_tokens": 3072}`,
//!   `{"type": "accessed", "path": [0,0,2]}`. Reply: `{"ok": true, ...}`.
//! - `{"type": "stats"}` for a state summary.
//!
//! Session state, the index snapshot, and the document-name table persist
//! in the data directory (`sessions.json`, `index.json`, `docs.json`);
//! every write goes through a temp-file rename so a crash never leaves a
//! torn store.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::dedup::{self, SessionState, SessionStore};
use crate::distance::DistanceParams;
use crate::error::{Error, Result};
use crate::hints;
use crate::index::{CacheEvent, ContextIndex, IndexSnapshot};
use crate::ordering;
use crate::types::{Context, DocId, RewrittenRequest};
use crate::workload::DocInterner;

pub const SESSIONS_FILE: &str = "sessions.json";
pub const INDEX_FILE: &str = "index.json";
pub const DOCS_FILE: &str = "docs.json";

/// Gateway tuning knobs.
#[derive(Debug, Clone, Copy)]
pub struct GatewayOptions {
    pub alpha: f64,
}

impl Default for GatewayOptions {
    fn default() -> Self {
        GatewayOptions {
            alpha: crate::distance::DEFAULT_ALPHA,
        }
    }
}

#[derive(Deserialize)]
struct WireRequest {
    session_id: String,
    turn: u32,
    retrieved: Vec<String>,
    doc_tokens: BTreeMap<String, u64>,
    #[serde(default)]
    question: Option<String>,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct WireDedupRef {
    pub doc: String,
    pub turn: u32,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct WireReply {
    pub session_id: String,
    pub turn: u32,
    pub ordered_docs: Vec<String>,
    pub dedup_refs: Vec<WireDedupRef>,
    pub order_hint: Option<String>,
    pub location_hints: Vec<String>,
    pub prompt_text: String,
}

#[derive(Serialize)]
struct ErrorReply<'a> {
    error: &'a str,
}

#[derive(Serialize)]
struct OkReply {
    ok: bool,
    applied: usize,
}

#[derive(Serialize)]
struct StatsReply {
    sessions: usize,
    index_nodes: usize,
    cached_tokens: u64,
}

/// The gateway's whole mutable state. One instance is shared behind a
/// mutex: replies depend only on (persisted state, request).
pub struct GatewayCore {
    index: ContextIndex,
    sessions: SessionStore,
    interner: DocInterner,
    data_dir: PathBuf,
}

impl GatewayCore {
    /// Opens (or initializes) the state in `data_dir`.
    pub fn open(data_dir: &Path, options: GatewayOptions) -> Result<Self> {
        std::fs::create_dir_all(data_dir)?;
        let params = DistanceParams::unchecked(options.alpha);

        let index_path = data_dir.join(INDEX_FILE);
        let index = if index_path.exists() {
            let snapshot: IndexSnapshot =
                serde_json::from_str(&std::fs::read_to_string(&index_path)?)?;
            ContextIndex::from_snapshot(&snapshot)?
        } else {
            ContextIndex::new(params)
        };

        let docs_path = data_dir.join(DOCS_FILE);
        let mut interner = DocInterner::new();
        if docs_path.exists() {
            let names: Vec<String> = serde_json::from_str(&std::fs::read_to_string(&docs_path)?)?;
            for name in &names {
                interner.intern(name);
            }
        }

        let sessions_path = data_dir.join(SESSIONS_FILE);
        let mut sessions = if sessions_path.exists() {
            SessionStore::from_json(&std::fs::read_to_string(&sessions_path)?)?
        } else {
            SessionStore::new()
        };
        // Node handles do not survive snapshot renumbering; re-resolve them
        // from the persisted paths.
        for state in sessions.sessions.values_mut() {
            state.node = index.traverse(&state.path).ok();
        }

        Ok(GatewayCore {
            index,
            sessions,
            interner,
            data_dir: data_dir.to_path_buf(),
        })
    }

    /// Seeds the index from an initial set of contexts (clustered build)
    /// and persists everything.
    pub fn seed_index(&mut self, contexts: &[Context], interner: DocInterner) -> Result<()> {
        let params = *self.index.params();
        self.index = ContextIndex::build(contexts, params)?;
        self.interner = interner;
        self.persist()
    }

    pub fn index(&self) -> &ContextIndex {
        &self.index
    }

    /// Handles one protocol line and always produces one reply line.
    pub fn handle_line(&mut self, line: &str) -> String {
        let reply = self.dispatch(line);
        match reply {
            Ok(json) => json,
            Err(err) => serde_json::to_string(&ErrorReply {
                error: &err.to_string(),
            })
            .expect("error reply serializes"),
        }
    }

    fn dispatch(&mut self, line: &str) -> Result<String> {
        let value: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| Error::Config(format!("malformed request: {e}")))?;

        if value.is_array() {
            let events: Vec<CacheEvent> = serde_json::from_value(value)
                .map_err(|e| Error::Config(format!("malformed event batch: {e}")))?;
            let applied = events.len();
            for event in &events {
                self.index.apply_cache_event(event)?;
            }
            self.persist()?;
            return Ok(serde_json::to_string(&OkReply { ok: true, applied })?);
        }

        match value.get("type").and_then(|t| t.as_str()) {
            Some("stats") => {
                let reply = StatsReply {
                    sessions: self.sessions.sessions.len(),
                    index_nodes: self.index.node_count(),
                    cached_tokens: self.index.total_seq_len(),
                };
                Ok(serde_json::to_string(&reply)?)
            }
            Some(_) => {
                let event: CacheEvent = serde_json::from_value(value)
                    .map_err(|e| Error::Config(format!("malformed event: {e}")))?;
                self.index.apply_cache_event(&event)?;
                self.persist()?;
                Ok(serde_json::to_string(&OkReply {
                    ok: true,
                    applied: 1,
                })?)
            }
            None => {
                let request: WireRequest = serde_json::from_value(value)
                    .map_err(|e| Error::Config(format!("malformed request: {e}")))?;
                let reply = self.handle_request(request)?;
                self.persist()?;
                Ok(serde_json::to_string(&reply)?)
            }
        }
    }

    fn handle_request(&mut self, request: WireRequest) -> Result<WireReply> {
        let docs: Vec<DocId> = request
            .retrieved
            .iter()
            .map(|name| self.interner.intern(name))
            .collect();
        let tokens: BTreeMap<DocId, u64> = request
            .doc_tokens
            .iter()
            .map(|(name, t)| (self.interner.intern(name), *t))
            .collect();
        let ctx = Context::new(docs, tokens, request.session_id.clone(), request.turn)?;

        let rewritten: RewrittenRequest;
        if request.turn == 0 {
            let placed = ordering::place_context(&mut self.index, &ctx)?;
            let order_hint = if placed.ordered.docs != ctx.docs {
                Some(hints::render_order_hint(&ctx.docs, &|d| self.label(d))?)
            } else {
                None
            };
            rewritten = RewrittenRequest {
                original: ctx.clone(),
                ordered_docs: placed.ordered.docs.clone(),
                dedup_refs: vec![],
                order_hint,
                location_hints: vec![],
                path: placed.ordered.path.clone(),
            };
            self.sessions.insert(SessionState::register(
                &ctx,
                &placed.ordered,
                Some(placed.node),
            ));
        } else {
            if !self.sessions.contains(&request.session_id) {
                return Err(Error::UnknownSession(request.session_id));
            }
            {
                let state = self.sessions.get(&request.session_id)?;
                if request.turn != state.turn {
                    return Err(Error::Config(format!(
                        "session {:?} expected turn {}, got {}",
                        request.session_id, state.turn, request.turn
                    )));
                }
                dedup::activate_multi_turn(state, &mut self.index)?;
            }
            let state = self.sessions.get_mut(&request.session_id)?;
            let outcome = {
                let interner = &self.interner;
                let labeler =
                    |d: DocId| -> String { format!("[Doc_{}]", interner.name(d).unwrap_or("?")) };
                dedup::dedup_turn_with(state, &self.index, &ctx, &labeler)?
            };
            rewritten = outcome.request;
        }

        rewritten.validate()?;
        let layout = hints::assemble(
            &rewritten,
            request.question.as_deref().unwrap_or(""),
            &[],
            None,
            true,
        );
        let prompt_text = layout.to_text(&|d| self.label(d));

        Ok(WireReply {
            session_id: request.session_id,
            turn: request.turn,
            ordered_docs: rewritten
                .ordered_docs
                .iter()
                .map(|d| self.name(*d))
                .collect(),
            dedup_refs: rewritten
                .dedup_refs
                .iter()
                .map(|r| WireDedupRef {
                    doc: self.name(r.doc),
                    turn: r.turn,
                })
                .collect(),
            order_hint: rewritten.order_hint.clone(),
            location_hints: rewritten.location_hints.clone(),
            prompt_text,
        })
    }

    fn name(&self, doc: DocId) -> String {
        self.interner
            .name(doc)
            .map(|s| s.to_string())
            .unwrap_or_else(|| doc.to_string())
    }

    fn label(&self, doc: DocId) -> String {
        format!("[Doc_{}]", self.name(doc))
    }

    /// Persists every store with write-temp-rename.
    pub fn persist(&self) -> Result<()> {
        write_atomic(
            &self.data_dir.join(SESSIONS_FILE),
            self.sessions.to_json()?.as_bytes(),
        )?;
        write_atomic(
            &self.data_dir.join(INDEX_FILE),
            serde_json::to_string_pretty(&self.index.snapshot())?.as_bytes(),
        )?;
        let names: Vec<&str> = (0..self.interner.len())
            .map(|i| self.interner.name(DocId(i as u64)).unwrap())
            .collect();
        write_atomic(
            &self.data_dir.join(DOCS_FILE),
            serde_json::to_string(&names)?.as_bytes(),
        )?;
        Ok(())
    }
}

/// Atomic file replacement: write a sibling temp file, then rename over the
/// target. A crash mid-write leaves the old file intact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Handle to a running gateway.
pub struct GatewayHandle {
    addr: std::net::SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<std::thread::JoinHandle<()>>,
    pub core: Arc<Mutex<GatewayCore>>,
}

impl GatewayHandle {
    pub fn addr(&self) -> std::net::SocketAddr {
        self.addr
    }

    /// Stops accepting connections and joins the accept loop. Established
    /// connections finish their in-flight request and close on next read.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }
}

/// Starts the gateway on `bind` with state in `data_dir`.
///
/// One writer: every request locks the shared core, so mutations to the
/// index and session store are serialized while connections are handled
/// concurrently.
pub fn serve<A: ToSocketAddrs>(
    bind: A,
    data_dir: &Path,
    options: GatewayOptions,
) -> Result<GatewayHandle> {
    let core = Arc::new(Mutex::new(GatewayCore::open(data_dir, options)?));
    let listener = TcpListener::bind(bind)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));

    let accept_core = Arc::clone(&core);
    let accept_stop = Arc::clone(&stop);
    let accept_thread = std::thread::spawn(move || {
        while !accept_stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let core = Arc::clone(&accept_core);
                    let stop = Arc::clone(&accept_stop);
                    std::thread::spawn(move || handle_connection(stream, core, stop));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(std::time::Duration::from_millis(10));
                }
                Err(_) => break,
            }
        }
    });

    Ok(GatewayHandle {
        addr,
        stop,
        accept_thread: Some(accept_thread),
        core,
    })
}

fn handle_connection(
    stream: std::net::TcpStream,
    core: Arc<Mutex<GatewayCore>>,
    stop: Arc<AtomicBool>,
) {
    let reader = BufReader::new(match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    });
    let mut writer = stream;
    for line in reader.lines() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let line = match line {
            Ok(l) => l,
            Err(_) => break,
        };
        if line.trim().is_empty() {
            continue;
        }
        let reply = {
            let mut core = core.lock().expect("gateway core lock");
            core.handle_line(&line)
        };
        if writer.write_all(reply.as_bytes()).is_err()
            || writer.write_all(b"\n").is_err()
            || writer.flush().is_err()
        {
            break;
        }
    }
}
