//! Synthetic workload generation and retrieval-trace ingestion.
//!
//! The generator reproduces the two overlap structures that make context
//! reuse pay off: a Zipf-skewed document popularity (many sessions pull the
//! same hot documents, each in its own relevance order) and intra-session
//! overlap (later turns re-retrieve part of the session's history).
//!
//! Traces are line-delimited JSON, one record per line, with string document
//! ids: `{"session_id": "...", "turn": 0, "retrieved": ["d1", ...],
//! "doc_tokens": {"d1": 1024, ...}, "query": "optional"}`. String ids are
//! interned to numeric [`DocId`]s on load.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Context, DocId};

/// Tokens per document when a workload does not specify its own counts,
/// matching a 1024-token chunking.
pub const DEFAULT_DOC_TOKENS: u64 = 1024;

/// Parameters of a synthetic workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    /// Corpus size.
    pub n_docs: u64,
    pub n_sessions: u32,
    pub turns_per_session: u32,
    /// Documents retrieved per request.
    pub k: usize,
    /// Popularity skew exponent; 0 samples uniformly.
    pub zipf_s: f64,
    /// Target fraction of each turn (>= 1) re-retrieved from the session's
    /// history.
    pub intra_session_overlap: f64,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_docs == 0 || self.n_sessions == 0 || self.turns_per_session == 0 || self.k == 0 {
            return Err(Error::InfeasibleSpec("all counts must be positive".into()));
        }
        if self.k as u64 > self.n_docs {
            return Err(Error::InfeasibleSpec(format!(
                "k = {} exceeds corpus size {}",
                self.k, self.n_docs
            )));
        }
        if self.zipf_s < 0.0 {
            return Err(Error::InfeasibleSpec("zipf_s must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.intra_session_overlap) {
            return Err(Error::InfeasibleSpec(
                "intra_session_overlap must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// One retrieval event of a trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub session_id: String,
    pub turn: u32,
    pub query: Option<String>,
    pub retrieved: Vec<DocId>,
    pub doc_tokens: BTreeMap<DocId, u64>,
}

impl TraceRecord {
    /// The record as a validated retrieval context.
    pub fn to_context(&self) -> Result<Context> {
        Context::new(
            self.retrieved.clone(),
            self.doc_tokens.clone(),
            self.session_id.clone(),
            self.turn,
        )
    }
}

/// Bidirectional mapping between external string document ids and the
/// numeric ids used everywhere else.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DocInterner {
    by_name: HashMap<String, DocId>,
    names: Vec<String>,
}

impl DocInterner {
    pub fn new() -> Self {
        DocInterner::default()
    }

    pub fn intern(&mut self, name: &str) -> DocId {
        if let Some(id) = self.by_name.get(name) {
            return *id;
        }
        let id = DocId(self.names.len() as u64);
        self.by_name.insert(name.to_string(), id);
        self.names.push(name.to_string());
        id
    }

    pub fn lookup(&self, name: &str) -> Option<DocId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: DocId) -> Option<&str> {
        self.names.get(id.0 as usize).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// A trace plus the interner that maps its document ids back to strings.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
    pub interner: DocInterner,
}

impl Trace {
    /// Re-interns documents in canonical name order (numeric names sort by
    /// value, others lexicographically after them) and remaps every record.
    /// Index structures built from the trace then tie-break by the external
    /// id instead of by first appearance in the file.
    pub fn canonicalize_doc_order(&mut self) {
        let mut names: Vec<String> = (0..self.interner.len())
            .map(|i| self.interner.name(DocId(i as u64)).unwrap().to_string())
            .collect();
        names.sort_by_key(|a| name_sort_key(a));
        let mut canonical = DocInterner::new();
        for name in &names {
            canonical.intern(name);
        }
        let remap: HashMap<DocId, DocId> = (0..self.interner.len())
            .map(|i| {
                let old = DocId(i as u64);
                let name = self.interner.name(old).unwrap();
                (old, canonical.lookup(name).unwrap())
            })
            .collect();
        for record in &mut self.records {
            for doc in &mut record.retrieved {
                *doc = remap[doc];
            }
            record.doc_tokens = record
                .doc_tokens
                .iter()
                .map(|(d, t)| (remap[d], *t))
                .collect();
        }
        self.interner = canonical;
    }
}

fn name_sort_key(name: &str) -> (u8, u64, String) {
    match name.parse::<u64>() {
        Ok(v) => (0, v, String::new()),
        Err(_) => (1, 0, name.to_string()),
    }
}

// Wire form of one trace line.
#[derive(Serialize, Deserialize)]
struct WireRecord {
    session_id: String,
    turn: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    query: Option<String>,
    retrieved: Vec<String>,
    doc_tokens: BTreeMap<String, u64>,
}

/// Zipf sampler over ranks `0..n` with weight `1/(rank+1)^s`, by inversion
/// of the cumulative weight table.
pub struct ZipfSampler {
    cumulative: Vec<f64>,
    total: f64,
}

impl ZipfSampler {
    pub fn new(n: u64, s: f64) -> Self {
        let mut cumulative = Vec::with_capacity(n as usize);
        let mut total = 0.0f64;
        for rank in 0..n {
            total += 1.0 / ((rank + 1) as f64).powf(s);
            cumulative.push(total);
        }
        ZipfSampler { cumulative, total }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> u64 {
        let u: f64 = rng.gen::<f64>() * self.total;
        self.cumulative.partition_point(|c| *c < u) as u64
    }

    /// Theoretical CDF at rank (inclusive), for calibration and tests.
    pub fn cdf(&self, rank: u64) -> f64 {
        self.cumulative[rank as usize] / self.total
    }

    fn weight(&self, rank: u64) -> f64 {
        let i = rank as usize;
        if i == 0 {
            self.cumulative[0]
        } else {
            self.cumulative[i] - self.cumulative[i - 1]
        }
    }
}

/// Generates a synthetic trace. Deterministic for a given spec (the seed is
/// part of the spec); records are emitted turn-major so concurrent sessions
/// interleave the way a serving system would see them.
pub fn generate(spec: &WorkloadSpec) -> Result<Trace> {
    spec.validate()?;
    let sampler = ZipfSampler::new(spec.n_docs, spec.zipf_s);

    let mut interner = DocInterner::new();
    for d in 0..spec.n_docs {
        interner.intern(&format!("doc-{d:05}"));
    }

    // Per-session relevance jitter: a stable multiplicative noise per
    // (session, doc) so overlapping retrievals come back in different but
    // session-consistent orders. The noise is heavy-tailed so per-query
    // relevance, not global popularity, decides the ranking.
    let noise = |session: u32, doc: u64| -> f64 {
        let mut h = spec.seed ^ 0x9e37_79b9_7f4a_7c15;
        for v in [session as u64, doc] {
            h ^= v.wrapping_mul(0xff51_afd7_ed55_8ccd).rotate_left(31);
            h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
        }
        // Map to (0, 1], then to a Pareto factor.
        let u = ((h >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
        u.powf(-3.0)
    };

    let mut histories: Vec<Vec<DocId>> = vec![Vec::new(); spec.n_sessions as usize];
    let mut seen: Vec<HashSet<DocId>> = vec![HashSet::new(); spec.n_sessions as usize];
    let mut records = Vec::with_capacity((spec.n_sessions * spec.turns_per_session) as usize);

    for turn in 0..spec.turns_per_session {
        for session in 0..spec.n_sessions {
            let mut rng = ChaCha8Rng::seed_from_u64(
                spec.seed
                    .wrapping_mul(0x5851_f42d_4c95_7f2d)
                    .wrapping_add(((session as u64) << 20) | turn as u64),
            );
            let history = &histories[session as usize];
            let seen_docs = &mut seen[session as usize];

            let n_overlap = if turn == 0 {
                0
            } else {
                ((spec.intra_session_overlap * spec.k as f64).round() as usize)
                    .min(history.len())
                    .min(spec.k)
            };

            let mut picked: Vec<DocId> = Vec::with_capacity(spec.k);
            let mut picked_set: HashSet<DocId> = HashSet::with_capacity(spec.k);

            // Overlap part: uniform draw from the session's history.
            let mut pool: Vec<DocId> = history.clone();
            for _ in 0..n_overlap {
                let i = rng.gen_range(0..pool.len());
                let doc = pool.swap_remove(i);
                picked_set.insert(doc);
                picked.push(doc);
            }

            // Novel part: popularity-skewed draw outside the history.
            let mut guard = 0u64;
            while picked.len() < spec.k {
                let doc = DocId(sampler.sample(&mut rng));
                guard += 1;
                if guard > 200_000 {
                    // Heavily skewed spec with a small unseen pool: fall
                    // back to a scan over the least popular ranks.
                    for d in 0..spec.n_docs {
                        let doc = DocId(d);
                        if !picked_set.contains(&doc) && !seen_docs.contains(&doc) {
                            picked_set.insert(doc);
                            picked.push(doc);
                            if picked.len() == spec.k {
                                break;
                            }
                        }
                    }
                    break;
                }
                if picked_set.contains(&doc) || seen_docs.contains(&doc) {
                    continue;
                }
                picked_set.insert(doc);
                picked.push(doc);
            }
            if picked.len() < spec.k {
                return Err(Error::InfeasibleSpec(format!(
                    "session {session} exhausted the corpus at turn {turn}"
                )));
            }

            // Rank by relevance score: popularity scaled by the session's
            // jitter, so orders vary across sessions but repeated docs keep
            // a stable relative order within one session.
            picked.sort_by(|a, b| {
                let score = |d: &DocId| sampler.weight(d.0) * noise(session, d.0);
                score(b)
                    .partial_cmp(&score(a))
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.0.cmp(&b.0))
            });

            for doc in &picked {
                if seen_docs.insert(*doc) {
                    histories[session as usize].push(*doc);
                }
            }

            records.push(TraceRecord {
                session_id: format!("s{session:05}"),
                turn,
                query: None,
                retrieved: picked.clone(),
                doc_tokens: picked.iter().map(|d| (*d, DEFAULT_DOC_TOKENS)).collect(),
            });
        }
    }
    Ok(Trace { records, interner })
}

/// Writes a trace as line-delimited JSON.
pub fn save_trace(trace: &Trace, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for record in &trace.records {
        let wire = WireRecord {
            session_id: record.session_id.clone(),
            turn: record.turn,
            query: record.query.clone(),
            retrieved: record
                .retrieved
                .iter()
                .map(|d| trace.interner.name(*d).unwrap_or("doc-unknown").to_string())
                .collect(),
            doc_tokens: record
                .doc_tokens
                .iter()
                .map(|(d, t)| {
                    (
                        trace.interner.name(*d).unwrap_or("doc-unknown").to_string(),
                        *t,
                    )
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &wire)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a line-delimited JSON trace, interning string ids and validating
/// each record: duplicate-free retrievals, token counts for every document,
/// and per-session turn numbers contiguous from 0.
pub fn load_trace(path: &Path) -> Result<Trace> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut interner = DocInterner::new();
    let mut records = Vec::new();
    let mut next_turn: HashMap<String, u32> = HashMap::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireRecord = serde_json::from_str(&line).map_err(|e| Error::TraceParse {
            line: lineno + 1,
            reason: e.to_string(),
        })?;

        let mut retrieved = Vec::with_capacity(wire.retrieved.len());
        let mut dedup = HashSet::with_capacity(wire.retrieved.len());
        for name in &wire.retrieved {
            let id = interner.intern(name);
            if !dedup.insert(id) {
                return Err(Error::TraceValidation {
                    session: wire.session_id.clone(),
                    turn: wire.turn,
                    reason: format!("duplicate document {name:?} in retrieval"),
                });
            }
            retrieved.push(id);
        }
        let mut doc_tokens = BTreeMap::new();
        for (name, tokens) in &wire.doc_tokens {
            doc_tokens.insert(interner.intern(name), *tokens);
        }
        for (i, doc) in retrieved.iter().enumerate() {
            match doc_tokens.get(doc) {
                None => {
                    return Err(Error::TraceValidation {
                        session: wire.session_id.clone(),
                        turn: wire.turn,
                        reason: format!("no token count for {:?}", wire.retrieved[i]),
                    })
                }
                Some(0) => {
                    return Err(Error::TraceValidation {
                        session: wire.session_id.clone(),
                        turn: wire.turn,
                        reason: format!("zero token count for {:?}", wire.retrieved[i]),
                    })
                }
                Some(_) => {}
            }
        }

        let expected = next_turn.entry(wire.session_id.clone()).or_insert(0);
        if wire.turn != *expected {
            return Err(Error::TraceValidation {
                session: wire.session_id.clone(),
                turn: wire.turn,
                reason: format!("expected turn {expected}, turns must be contiguous from 0"),
            });
        }
        *expected += 1;

        records.push(TraceRecord {
            session_id: wire.session_id,
            turn: wire.turn,
            query: wire.query,
            retrieved,
            doc_tokens,
        });
    }
    Ok(Trace { records, interner })
}

/// Summary statistics of a trace, for workload inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStats {
    pub records: usize,
    pub sessions: usize,
    pub distinct_docs: usize,
    pub total_doc_tokens: u64,
    /// Fraction of retrievals covered by the most frequent 20% of documents.
    pub top20_share: f64,
    /// Mean fraction of each turn (>= 1) already present in its session's
    /// history.
    pub mean_turn_overlap: f64,
}

pub fn trace_stats(records: &[TraceRecord]) -> TraceStats {
    let mut freq: HashMap<DocId, u64> = HashMap::new();
    let mut sessions: HashMap<&str, HashSet<DocId>> = HashMap::new();
    let mut total_tokens = 0u64;
    let mut overlap_sum = 0.0f64;
    let mut overlap_n = 0usize;

    // Records are turn-major or session-major; overlap is measured against
    // the docs the session has accumulated so far in record order.
    let mut ordered: Vec<&TraceRecord> = records.iter().collect();
    ordered.sort_by_key(|r| (r.turn, r.session_id.clone()));
    for record in &ordered {
        for doc in &record.retrieved {
            *freq.entry(*doc).or_insert(0) += 1;
            total_tokens += record.doc_tokens.get(doc).copied().unwrap_or(0);
        }
        let seen = sessions.entry(record.session_id.as_str()).or_default();
        if record.turn > 0 && !record.retrieved.is_empty() {
            let dup = record.retrieved.iter().filter(|d| seen.contains(d)).count();
            overlap_sum += dup as f64 / record.retrieved.len() as f64;
            overlap_n += 1;
        }
        seen.extend(record.retrieved.iter().copied());
    }

    let mut counts: Vec<u64> = freq.values().copied().collect();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let total: u64 = counts.iter().sum();
    let top = (counts.len() as f64 * 0.2).ceil() as usize;
    let top_sum: u64 = counts.iter().take(top.max(1)).sum();

    TraceStats {
        records: records.len(),
        sessions: sessions.len(),
        distinct_docs: freq.len(),
        total_doc_tokens: total_tokens,
        top20_share: if total == 0 {
            0.0
        } else {
            top_sum as f64 / total as f64
        },
        mean_turn_overlap: if overlap_n == 0 {
            0.0
        } else {
            overlap_sum / overlap_n as f64
        },
    }
}

/// Finds by bisection the smallest skew whose generated trace routes at
/// least `target_share` of retrievals through the top 20% of documents.
pub fn calibrate_zipf(base: &WorkloadSpec, target_share: f64) -> Result<f64> {
    let mut lo = 0.0f64;
    let mut hi = 2.0f64;
    for _ in 0..12 {
        let mid = (lo + hi) / 2.0;
        let spec = WorkloadSpec {
            zipf_s: mid,
            ..base.clone()
        };
        let trace = generate(&spec)?;
        if trace_stats(&trace.records).top20_share >= target_share {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
