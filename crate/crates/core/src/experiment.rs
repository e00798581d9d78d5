//! Trace-driven experiments: run a workload through the
//! rewrite-order-schedule pipeline against the cache simulator and report
//! hit rates, token savings, and per-request accounting.
//!
//! Each pipeline stage can be toggled independently; with everything off the
//! run degenerates to the exact-prefix baseline, which is what the
//! improvement ratios are measured against.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cache_sim::{self, CacheConfig, CacheState, ReportRow};
use crate::dedup::{self, SessionState, SessionStore};
use crate::distance::DistanceParams;
use crate::error::{Error, Result};
use crate::hints;
use crate::index::ContextIndex;
use crate::ordering;
use crate::scheduler;
use crate::types::{Context, DocId, RewrittenRequest, SearchPath};
use crate::workload::{self, Trace, TraceRecord, WorkloadSpec};

/// Pipeline stage switches. Independent; all on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub ordering: bool,
    pub scheduling: bool,
    pub dedup: bool,
    pub hints: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            ordering: true,
            scheduling: true,
            dedup: true,
            hints: true,
        }
    }
}

impl Toggles {
    pub fn none() -> Self {
        Toggles {
            ordering: false,
            scheduling: false,
            dedup: false,
            hints: false,
        }
    }
}

/// Where the requests come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorkloadSource {
    /// Generate synthetically; the experiment seed overrides the spec's.
    Spec { spec: WorkloadSpec },
    /// Replay a line-delimited JSON trace file.
    TracePath { path: PathBuf },
}

/// Full experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub workload: WorkloadSource,
    pub cache: CacheConfig,
    /// Positional weight of the context distance.
    pub alpha: f64,
    pub toggles: Toggles,
    /// Requests per scheduling batch; 0 processes the trace as one batch.
    /// The index is built by clustering the first batch's contexts.
    pub batch_size: usize,
    /// When positive, the first batch is exactly this many records and
    /// only later records chunk by `batch_size`. Lets the index-building
    /// initialization batch differ in size from the steady-state batches.
    pub init_batch: usize,
    /// Prompt scaffolding tokens charged per request.
    pub scaffold_tokens: u64,
    /// Output directory for `per_request.csv` and `summary.json`.
    pub output: Option<PathBuf>,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn new(workload: WorkloadSource, cache: CacheConfig) -> Self {
        ExperimentConfig {
            workload,
            cache,
            alpha: crate::distance::DEFAULT_ALPHA,
            toggles: Toggles::default(),
            batch_size: 0,
            init_batch: 0,
            scaffold_tokens: 0,
            output: None,
            seed: 0,
        }
    }
}

/// Aggregate results of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub requests: usize,
    pub hit_tokens: u64,
    pub miss_tokens: u64,
    pub total_tokens: u64,
    pub hit_rate: f64,
    /// Tokens actually computed (cache misses).
    pub prefilled_tokens: u64,
    /// Tokens removed by multi-turn de-duplication.
    pub dedup_saved_tokens: u64,
    pub evicted_tokens: u64,
    /// Requests whose prefill order differs from their retrieval order.
    pub reordered_requests: usize,
    pub toggles: Toggles,
    /// Wall-clock cost of the initial index construction. Excluded from
    /// determinism comparisons.
    pub index_build_seconds: f64,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub summary: ExperimentSummary,
    pub rows: Vec<ReportRow>,
    /// Rewritten requests in execution order, for downstream inspection.
    pub requests: Vec<RewrittenRequest>,
}

struct Conversation {
    seq: Vec<DocId>,
    tokens: BTreeMap<DocId, u64>,
    path: SearchPath,
    node: Option<crate::index::NodeId>,
}

#[derive(Debug)]
struct PlannedRequest {
    request_id: String,
    prefill_docs: Vec<DocId>,
    tokens: BTreeMap<DocId, u64>,
    path: SearchPath,
    /// Stable handle used to refresh `path` at execution time; eviction
    /// between the rewrite and execution phases can renumber siblings.
    node: Option<crate::index::NodeId>,
    rewritten: RewrittenRequest,
}

/// Runs one experiment end to end. Deterministic for a fixed config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let trace = load_workload(cfg)?;
    let records = &trace.records;
    if records.is_empty() {
        return Err(Error::Config("workload contains no requests".into()));
    }

    let params = DistanceParams::unchecked(cfg.alpha);
    let mut cache = CacheState::new(cfg.cache);
    let mut sessions = SessionStore::new();
    let mut conversations: BTreeMap<String, Conversation> = BTreeMap::new();
    let mut index: Option<ContextIndex> = None;
    let mut index_build_seconds = 0.0f64;

    let batch_size = if cfg.batch_size == 0 {
        records.len()
    } else {
        cfg.batch_size
    };
    let mut batches: Vec<&[TraceRecord]> = Vec::new();
    if cfg.init_batch > 0 && cfg.init_batch < records.len() {
        batches.push(&records[..cfg.init_batch]);
        batches.extend(records[cfg.init_batch..].chunks(batch_size));
    } else {
        batches.extend(records.chunks(batch_size));
    }

    let mut rows = Vec::with_capacity(records.len());
    let mut requests = Vec::with_capacity(records.len());
    let mut summary = ExperimentSummary {
        requests: 0,
        hit_tokens: 0,
        miss_tokens: 0,
        total_tokens: 0,
        hit_rate: 0.0,
        prefilled_tokens: 0,
        dedup_saved_tokens: 0,
        evicted_tokens: 0,
        reordered_requests: 0,
        toggles: cfg.toggles,
        index_build_seconds: 0.0,
    };

    for (batch_no, batch) in batches.into_iter().enumerate() {
        // The first batch initializes the index by clustering; later
        // contexts enter online through search + insert.
        if batch_no == 0 && cfg.toggles.ordering {
            let initial: Vec<Context> = batch
                .iter()
                .filter(|r| r.turn == 0)
                .map(|r| r.to_context())
                .collect::<Result<_>>()?;
            if !initial.is_empty() {
                let start = Instant::now();
                index = Some(ContextIndex::build(&initial, params)?);
                index_build_seconds = start.elapsed().as_secs_f64();
            } else {
                index = Some(ContextIndex::new(params));
            }
        } else if batch_no == 0 {
            index = None;
        }

        // Rewrite phase.
        let mut planned = Vec::with_capacity(batch.len());
        for record in batch {
            planned.push(plan_request(
                record,
                cfg,
                index.as_mut(),
                &mut sessions,
                &mut conversations,
                &mut summary,
            )?);
        }

        // Scheduling phase.
        let order: Vec<usize> = if cfg.toggles.scheduling {
            let paths: Vec<&SearchPath> = planned.iter().map(|p| &p.path).collect();
            scheduler::schedule_paths(&paths).order
        } else {
            (0..planned.len()).collect()
        };

        // Execution phase.
        for i in order {
            let p = &planned[i];
            // Refresh the path: eviction may have renumbered the branch
            // since the rewrite phase. A node evicted outright means the
            // session's cached prefix is gone; its hits/misses still count
            // but the index skips the per-node sync.
            let exec_path = match (index.as_ref(), p.node) {
                (Some(index), Some(node)) => index
                    .node(node)
                    .map(|n| n.path.clone())
                    .unwrap_or_else(|| p.path.clone()),
                _ => p.path.clone(),
            };
            let report = cache.prefill_sequence(
                &p.prefill_docs,
                &p.tokens.iter().map(|(k, v)| (*k, *v)).collect(),
                cfg.scaffold_tokens,
                &exec_path,
            )?;
            if let Some(index) = index.as_mut() {
                use crate::index::CacheEvent;
                for event in &report.events {
                    // Each applied event can restructure the tree, so
                    // path-bearing events are re-addressed through the
                    // stable node handle right before they land.
                    let fresh = match event {
                        CacheEvent::Evicted { .. } => Some(event.clone()),
                        CacheEvent::Accessed { .. } => {
                            p.node
                                .and_then(|id| index.node(id))
                                .map(|n| CacheEvent::Accessed {
                                    path: n.path.clone(),
                                })
                        }
                        CacheEvent::Appended { n_tokens, .. } => p
                            .node
                            .and_then(|id| index.node(id))
                            .map(|n| CacheEvent::Appended {
                                path: n.path.clone(),
                                n_tokens: *n_tokens,
                            }),
                    };
                    if let Some(event) = fresh {
                        index.apply_cache_event(&event)?;
                    }
                }
            }
            summary.hit_tokens += report.hit_tokens;
            summary.miss_tokens += report.miss_tokens;
            summary.total_tokens += report.total_tokens;
            summary.evicted_tokens += report.evicted_tokens;
            summary.requests += 1;
            rows.push(ReportRow::new(p.request_id.clone(), &report));
            requests.push(p.rewritten.clone());
        }
    }

    summary.prefilled_tokens = summary.miss_tokens;
    summary.hit_rate = if summary.total_tokens == 0 {
        0.0
    } else {
        summary.hit_tokens as f64 / summary.total_tokens as f64
    };
    summary.index_build_seconds = index_build_seconds;

    if let Some(dir) = &cfg.output {
        write_outputs(dir, &summary, &rows)?;
    }

    Ok(ExperimentOutput {
        summary,
        rows,
        requests,
    })
}

fn load_workload(cfg: &ExperimentConfig) -> Result<Trace> {
    match &cfg.workload {
        WorkloadSource::Spec { spec } => {
            let spec = WorkloadSpec {
                seed: cfg.seed,
                ..spec.clone()
            };
            workload::generate(&spec)
        }
        WorkloadSource::TracePath { path } => workload::load_trace(path),
    }
}

fn plan_request(
    record: &TraceRecord,
    cfg: &ExperimentConfig,
    mut index: Option<&mut ContextIndex>,
    sessions: &mut SessionStore,
    conversations: &mut BTreeMap<String, Conversation>,
    summary: &mut ExperimentSummary,
) -> Result<PlannedRequest> {
    let ctx = record.to_context()?;
    let request_id = format!("{}:{}", record.session_id, record.turn);

    if record.turn == 0 {
        let (ordered_docs, path, node) = match index.as_deref_mut() {
            Some(index) if cfg.toggles.ordering => {
                let placed = ordering::place_context(index, &ctx)?;
                (
                    placed.ordered.docs.clone(),
                    placed.ordered.path.clone(),
                    Some(placed.node),
                )
            }
            _ => (ctx.docs.clone(), SearchPath::root(), None),
        };

        let reordered = ordered_docs != ctx.docs;
        if reordered {
            summary.reordered_requests += 1;
        }
        let order_hint = if reordered && cfg.toggles.hints {
            Some(hints::render_order_hint(&ctx.docs, &hints::default_label)?)
        } else {
            None
        };

        let rewritten = RewrittenRequest {
            original: ctx.clone(),
            ordered_docs: ordered_docs.clone(),
            dedup_refs: vec![],
            order_hint,
            location_hints: vec![],
            path: path.clone(),
        };
        rewritten.validate()?;

        conversations.insert(
            record.session_id.clone(),
            Conversation {
                seq: ordered_docs.clone(),
                tokens: record.doc_tokens.clone(),
                path: path.clone(),
                node,
            },
        );
        if cfg.toggles.dedup {
            let ordered = ordering::OrderedContext {
                docs: ordered_docs.clone(),
                matched_prefix_len: 0,
                path: path.clone(),
                original_rank: ctx.positions(),
            };
            sessions.insert(SessionState::register(&ctx, &ordered, node));
        }

        return Ok(PlannedRequest {
            request_id,
            prefill_docs: ordered_docs,
            tokens: record.doc_tokens.clone(),
            path,
            node,
            rewritten,
        });
    }

    // Later turns continue the session's conversation.
    let conv = conversations
        .get_mut(&record.session_id)
        .ok_or_else(|| Error::UnknownSession(record.session_id.clone()))?;

    if cfg.toggles.dedup {
        let state = sessions.get_mut(&record.session_id)?;
        if state.turn == record.turn {
            // First continuation activates the multi-turn flag.
            if record.turn == 1 {
                if let Some(index) = index.as_deref_mut() {
                    dedup::activate_multi_turn(state, index)?;
                }
            }
        }
        let outcome = match index.as_deref() {
            Some(index) => dedup::dedup_turn(state, index, &ctx)?,
            None => {
                let scratch = ContextIndex::new(DistanceParams::unchecked(cfg.alpha));
                dedup::dedup_turn(state, &scratch, &ctx)?
            }
        };
        summary.dedup_saved_tokens += outcome.saved_tokens;

        let mut rewritten = outcome.request;
        if !cfg.toggles.hints {
            rewritten.location_hints.clear();
        }

        let mut prefill_docs = conv.seq.clone();
        prefill_docs.extend(rewritten.ordered_docs.iter().copied());
        conv.seq.extend(rewritten.ordered_docs.iter().copied());
        let mut tokens = conv.tokens.clone();
        for (d, t) in &record.doc_tokens {
            tokens.insert(*d, *t);
        }
        conv.tokens = tokens.clone();

        Ok(PlannedRequest {
            request_id,
            prefill_docs,
            tokens,
            path: conv.path.clone(),
            node: conv.node,
            rewritten,
        })
    } else {
        // Baseline multi-turn: the whole retrieval is appended again, even
        // documents the conversation already contains.
        let mut prefill_docs = conv.seq.clone();
        prefill_docs.extend(ctx.docs.iter().copied());
        conv.seq.extend(ctx.docs.iter().copied());
        let mut tokens = conv.tokens.clone();
        for (d, t) in &record.doc_tokens {
            tokens.insert(*d, *t);
        }
        conv.tokens = tokens.clone();

        let rewritten = RewrittenRequest {
            original: ctx.clone(),
            ordered_docs: ctx.docs.clone(),
            dedup_refs: vec![],
            order_hint: None,
            location_hints: vec![],
            path: conv.path.clone(),
        };

        Ok(PlannedRequest {
            request_id,
            prefill_docs,
            tokens,
            path: conv.path.clone(),
            node: conv.node,
            rewritten,
        })
    }
}

fn write_outputs(dir: &Path, summary: &ExperimentSummary, rows: &[ReportRow]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("per_request.csv"), cache_sim::rows_to_csv(rows))?;
    let json = serde_json::to_string_pretty(summary)?;
    std::fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(())
}

/// One stage of the ablation sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub name: String,
    pub summary: ExperimentSummary,
}

/// Results of the staged sweep baseline -> +ordering -> +scheduling ->
/// +dedup/hints, with hit-rate deltas between consecutive stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub stages: Vec<StageResult>,
    pub hit_rate_deltas: Vec<f64>,
}

/// Runs the standard ablation: each stage adds one pipeline component on
/// top of the previous stage, all against the same workload and seed.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<AblationReport> {
    let stages: [(&str, Toggles); 4] = [
        ("baseline", Toggles::none()),
        (
            "ordering",
            Toggles {
                ordering: true,
                ..Toggles::none()
            },
        ),
        (
            "ordering+scheduling",
            Toggles {
                ordering: true,
                scheduling: true,
                ..Toggles::none()
            },
        ),
        ("full", Toggles::default()),
    ];
    let mut results = Vec::new();
    for (name, toggles) in stages {
        let stage_cfg = ExperimentConfig {
            toggles,
            output: None,
            ..cfg.clone()
        };
        let out = run_experiment(&stage_cfg)?;
        results.push(StageResult {
            name: name.to_string(),
            summary: out.summary,
        });
    }
    let deltas = results
        .windows(2)
        .map(|w| w[1].summary.hit_rate - w[0].summary.hit_rate)
        .collect();
    Ok(AblationReport {
        stages: results,
        hit_rate_deltas: deltas,
    })
}
