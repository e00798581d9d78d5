//! Document-granularity prefix-cache simulator.
//!
//! Stands in for the inference engine's KV cache: a trie keyed by document
//! ids with a token budget and LRU eviction over leaves. Reuse boundaries in
//! this system always fall on document boundaries, so simulating documents
//! instead of tokens gives identical hit/miss numbers at a fraction of the
//! cost; prompt scaffolding (system prompt, separators) is tracked as a
//! token count on the trie root.
//!
//! Every prefill returns a report with hit/miss accounting plus the cache
//! events (`Accessed`/`Evicted`/`Appended`) the context index consumes to
//! stay in sync.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::CacheEvent;
use crate::types::{DocId, SearchPath};

/// Eviction policy; only LRU is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvictionPolicy {
    #[default]
    Lru,
}

/// Simulator configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    /// Token budget of the simulated prefix cache.
    pub capacity_tokens: u64,
    pub policy: EvictionPolicy,
}

impl CacheConfig {
    pub fn new(capacity_tokens: u64) -> Result<Self> {
        if capacity_tokens == 0 {
            return Err(Error::Config("cache capacity must be positive".into()));
        }
        Ok(CacheConfig {
            capacity_tokens,
            policy: EvictionPolicy::Lru,
        })
    }
}

/// Accounting for one prefill.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefillReport {
    pub hit_tokens: u64,
    pub miss_tokens: u64,
    pub total_tokens: u64,
    pub evicted_tokens: u64,
    /// Events for index synchronization, in the order they occurred.
    pub events: Vec<CacheEvent>,
}

struct TrieNode {
    tokens: u64,
    last_access: u64,
    created: u64,
    parent: Option<usize>,
    children: HashMap<DocId, usize>,
}

/// The simulated prefix cache.
pub struct CacheState {
    config: CacheConfig,
    arena: Vec<Option<TrieNode>>,
    resident_tokens: u64,
    clock: u64,
    /// Lazy min-heap of (last_access, created, node) eviction candidates.
    candidates: std::collections::BinaryHeap<std::cmp::Reverse<(u64, u64, usize)>>,
}

const ROOT: usize = 0;

impl CacheState {
    pub fn new(config: CacheConfig) -> Self {
        let root = TrieNode {
            tokens: 0,
            last_access: 0,
            created: 0,
            parent: None,
            children: HashMap::new(),
        };
        CacheState {
            config,
            arena: vec![Some(root)],
            resident_tokens: 0,
            clock: 0,
            candidates: std::collections::BinaryHeap::new(),
        }
    }

    pub fn capacity(&self) -> u64 {
        self.config.capacity_tokens
    }

    /// Tokens currently cached, including scaffolding.
    pub fn resident_tokens(&self) -> u64 {
        self.resident_tokens
    }

    /// Tokens currently cached for documents (scaffolding excluded).
    pub fn resident_doc_tokens(&self) -> u64 {
        self.resident_tokens - self.node(ROOT).tokens
    }

    fn node(&self, idx: usize) -> &TrieNode {
        self.arena[idx].as_ref().expect("live trie node")
    }

    fn node_mut(&mut self, idx: usize) -> &mut TrieNode {
        self.arena[idx].as_mut().expect("live trie node")
    }

    fn touch(&mut self, idx: usize) {
        self.clock += 1;
        let stamp = self.clock;
        let node = self.node_mut(idx);
        node.last_access = stamp;
        let created = node.created;
        self.candidates
            .push(std::cmp::Reverse((stamp, created, idx)));
    }

    /// Simulates prefilling `docs` (duplicate-free retrieval list). The
    /// longest cached prefix counts as hits; the rest is inserted, evicting
    /// LRU leaves that are not on the current path until the budget holds.
    /// `index_path` is stamped into the emitted events so the caller can
    /// forward them to the context index.
    pub fn prefill(
        &mut self,
        docs: &[DocId],
        token_counts: &HashMap<DocId, u64>,
        scaffold_tokens: u64,
        index_path: &SearchPath,
    ) -> Result<PrefillReport> {
        let mut seen = std::collections::HashSet::with_capacity(docs.len());
        for doc in docs {
            if !seen.insert(*doc) {
                return Err(Error::DuplicateDoc(*doc));
            }
        }
        self.prefill_sequence(docs, token_counts, scaffold_tokens, index_path)
    }

    /// Like [`prefill`](Self::prefill) but accepts sequences that repeat a
    /// document id, as full conversation prompts do when earlier turns are
    /// replayed without de-duplication. Repeated ids occupy distinct trie
    /// positions.
    pub fn prefill_sequence(
        &mut self,
        docs: &[DocId],
        token_counts: &HashMap<DocId, u64>,
        scaffold_tokens: u64,
        index_path: &SearchPath,
    ) -> Result<PrefillReport> {
        let mut needed = scaffold_tokens;
        for doc in docs {
            let t = *token_counts
                .get(doc)
                .ok_or(Error::MissingTokenCount(*doc))?;
            if t == 0 {
                return Err(Error::NonPositiveTokenCount(*doc));
            }
            needed += t;
        }
        if needed > self.config.capacity_tokens {
            return Err(Error::OverCapacity {
                needed,
                capacity: self.config.capacity_tokens,
                shortfall: needed - self.config.capacity_tokens,
            });
        }

        let mut hit = 0u64;
        let mut miss = 0u64;
        let mut evicted = 0u64;
        let mut pinned = vec![ROOT];

        // Scaffolding lives on the root node.
        let root_tokens = self.node(ROOT).tokens;
        if scaffold_tokens > 0 {
            if scaffold_tokens > root_tokens {
                hit += root_tokens;
                let grow = scaffold_tokens - root_tokens;
                miss += grow;
                evicted += self.make_room(grow, &pinned)?;
                self.node_mut(ROOT).tokens = scaffold_tokens;
                self.resident_tokens += grow;
            } else {
                hit += scaffold_tokens;
            }
        }
        self.touch(ROOT);

        // Walk the cached prefix.
        let mut cur = ROOT;
        let mut i = 0;
        while i < docs.len() {
            match self.node(cur).children.get(&docs[i]).copied() {
                Some(child) => {
                    cur = child;
                    pinned.push(cur);
                    self.touch(cur);
                    hit += self.node(cur).tokens;
                    i += 1;
                }
                None => break,
            }
        }
        let hit_doc_tokens = hit.saturating_sub(scaffold_tokens.min(hit));

        // Insert the remainder.
        while i < docs.len() {
            let doc = docs[i];
            let tokens = token_counts[&doc];
            evicted += self.make_room(tokens, &pinned)?;
            self.clock += 1;
            let created = self.arena.len() as u64;
            let node = TrieNode {
                tokens,
                last_access: self.clock,
                created,
                parent: Some(cur),
                children: HashMap::new(),
            };
            let idx = self.arena.len();
            self.arena.push(Some(node));
            self.node_mut(cur).children.insert(doc, idx);
            self.candidates
                .push(std::cmp::Reverse((self.clock, created, idx)));
            self.resident_tokens += tokens;
            miss += tokens;
            cur = idx;
            pinned.push(cur);
            i += 1;
        }

        debug_assert!(self.resident_tokens <= self.config.capacity_tokens);

        let mut events = Vec::new();
        if hit_doc_tokens > 0 {
            events.push(CacheEvent::Accessed {
                path: index_path.clone(),
            });
        }
        if evicted > 0 {
            events.push(CacheEvent::Evicted { n_tokens: evicted });
        }
        let miss_doc_tokens = miss.saturating_sub(scaffold_tokens.saturating_sub(root_tokens));
        if miss_doc_tokens > 0 {
            events.push(CacheEvent::Appended {
                path: index_path.clone(),
                n_tokens: miss_doc_tokens,
            });
        }

        Ok(PrefillReport {
            hit_tokens: hit,
            miss_tokens: miss,
            total_tokens: hit + miss,
            evicted_tokens: evicted,
            events,
        })
    }

    /// Evicts least-recently-used leaves, never touching `pinned` (the
    /// current prefill path), until `tokens` more fit in the budget.
    fn make_room(&mut self, tokens: u64, pinned: &[usize]) -> Result<u64> {
        let mut evicted = 0u64;
        let mut stashed = Vec::new();
        while self.resident_tokens + tokens > self.config.capacity_tokens {
            let victim = loop {
                let entry = match self.candidates.pop() {
                    Some(std::cmp::Reverse(e)) => e,
                    None => {
                        // Cannot happen after the up-front capacity check:
                        // unpinned residency is positive whenever room is
                        // still needed, and every unpinned subtree has a
                        // leaf.
                        return Err(Error::Config(
                            "cache eviction found no victim; capacity accounting broken".into(),
                        ));
                    }
                };
                let (stamp, _created, idx) = entry;
                let state = self.arena.get(idx).and_then(|s| s.as_ref());
                match state {
                    None => continue, // dead node, stale entry
                    Some(node) => {
                        if node.last_access != stamp {
                            continue; // superseded by a newer touch
                        }
                        if !node.children.is_empty() || pinned.contains(&idx) || idx == ROOT {
                            // Valid but not currently evictable; keep it.
                            stashed.push(std::cmp::Reverse(entry));
                            continue;
                        }
                        break idx;
                    }
                }
            };
            let node = self.arena[victim].take().expect("victim alive");
            if let Some(parent) = node.parent {
                self.node_mut(parent)
                    .children
                    .retain(|_, child| *child != victim);
            }
            self.resident_tokens -= node.tokens;
            evicted += node.tokens;
            // The parent may have become a leaf; its existing heap entry
            // (stamp-current) will surface it when needed.
        }
        self.candidates.extend(stashed);
        Ok(evicted)
    }
}

/// Aggregate hit rate over a set of reports: total hit tokens over total
/// prefilled tokens.
pub fn hit_rate(reports: &[PrefillReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::NoReports);
    }
    let hit: u64 = reports.iter().map(|r| r.hit_tokens).sum();
    let total: u64 = reports.iter().map(|r| r.total_tokens).sum();
    if total == 0 {
        return Ok(0.0);
    }
    Ok(hit as f64 / total as f64)
}

/// One per-request line of the exported accounting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRow {
    pub request_id: String,
    pub hit_tokens: u64,
    pub miss_tokens: u64,
    pub total_tokens: u64,
    pub evicted_tokens: u64,
}

impl ReportRow {
    pub fn new(request_id: impl Into<String>, report: &PrefillReport) -> Self {
        ReportRow {
            request_id: request_id.into(),
            hit_tokens: report.hit_tokens,
            miss_tokens: report.miss_tokens,
            total_tokens: report.total_tokens,
            evicted_tokens: report.evicted_tokens,
        }
    }
}

/// CSV rendering of report rows, header included.
pub fn rows_to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("request_id,hit_tokens,miss_tokens,total_tokens,evicted_tokens\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.request_id, r.hit_tokens, r.miss_tokens, r.total_tokens, r.evicted_tokens
        ));
    }
    out
}
