//! Command-line shell: generate workloads, build indexes, run trace-driven
//! experiments, inspect traces, and serve the rewrite pipeline.

use std::path::PathBuf;

use anyhow::{bail, Context as _};
use clap::{Args, Parser, Subcommand};

use ctxreuse::cache_sim::CacheConfig;
use ctxreuse::experiment::{
    run_ablation, run_experiment, ExperimentConfig, Toggles, WorkloadSource,
};
use ctxreuse::gateway::{self, GatewayOptions};
use ctxreuse::workload::{self, WorkloadSpec};

#[derive(Parser)]
#[command(
    name = "ctxreuse",
    version,
    about = "Context-reuse engine for RAG serving: index, order, de-duplicate, and hint retrieved contexts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic retrieval trace (line-delimited JSON).
    GenWorkload(GenWorkloadArgs),
    /// Build a context index from a trace's first-turn contexts and persist
    /// it into the data directory.
    BuildIndex(BuildIndexArgs),
    /// Replay a workload through the pipeline against the cache simulator.
    Run(RunArgs),
    /// Serve the rewrite pipeline over newline-delimited JSON (TCP).
    Serve(ServeArgs),
    /// Print summary statistics of a trace.
    Stats(StatsArgs),
}

#[derive(Args)]
struct SpecArgs {
    /// Corpus size.
    #[arg(long, default_value_t = 2000)]
    n_docs: u64,
    /// Number of sessions.
    #[arg(long, default_value_t = 500)]
    sessions: u32,
    /// Turns per session.
    #[arg(long, default_value_t = 1)]
    turns: u32,
    /// Documents retrieved per request.
    #[arg(long, default_value_t = 15)]
    k: usize,
    /// Popularity skew exponent (0 = uniform).
    #[arg(long, default_value_t = 1.0)]
    zipf: f64,
    /// Target fraction of each later turn drawn from session history.
    #[arg(long, default_value_t = 0.4)]
    overlap: f64,
}

impl SpecArgs {
    fn to_spec(&self, seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            n_docs: self.n_docs,
            n_sessions: self.sessions,
            turns_per_session: self.turns,
            k: self.k,
            zipf_s: self.zipf,
            intra_session_overlap: self.overlap,
            seed,
        }
    }
}

#[derive(Args)]
struct GenWorkloadArgs {
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output trace path.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct BuildIndexArgs {
    /// Trace whose first-turn contexts seed the index.
    #[arg(long)]
    trace: PathBuf,
    /// State directory shared with `serve`.
    #[arg(long, env = "CTXREUSE_DATA_DIR", default_value = "ctxreuse-data")]
    data_dir: PathBuf,
    /// Positional weight of the context distance.
    #[arg(long, default_value_t = 0.005)]
    alpha: f64,
}

#[derive(Args)]
struct RunArgs {
    /// Trace to replay; omitted means generate from the spec flags.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    spec: SpecArgs,
    /// Cache budget in tokens.
    #[arg(long, default_value_t = 1_000_000)]
    capacity: u64,
    #[arg(long, default_value_t = 0.005)]
    alpha: f64,
    /// Requests per scheduling batch (0 = whole trace).
    #[arg(long, default_value_t = 0)]
    batch_size: usize,
    /// Size of the index-building first batch (0 = same as batch-size).
    #[arg(long, default_value_t = 0)]
    init_batch: usize,
    /// Prompt scaffolding tokens charged per request.
    #[arg(long, default_value_t = 0)]
    scaffold: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable context ordering.
    #[arg(long)]
    no_ordering: bool,
    /// Disable batch scheduling.
    #[arg(long)]
    no_scheduling: bool,
    /// Disable multi-turn de-duplication.
    #[arg(long)]
    no_dedup: bool,
    /// Disable hint rendering.
    #[arg(long)]
    no_hints: bool,
    /// Run the staged sweep (baseline, +ordering, +scheduling, full)
    /// instead of a single configuration.
    #[arg(long)]
    ablation: bool,
    /// Directory for per_request.csv and summary.json.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7411")]
    bind: String,
    #[arg(long, env = "CTXREUSE_DATA_DIR", default_value = "ctxreuse-data")]
    data_dir: PathBuf,
    #[arg(long, default_value_t = 0.005)]
    alpha: f64,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    trace: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenWorkload(args) => {
            let spec = args.spec.to_spec(args.seed);
            let trace = workload::generate(&spec).context("generating workload")?;
            workload::save_trace(&trace, &args.output)
                .with_context(|| format!("writing {}", args.output.display()))?;
            println!(
                "wrote {} records ({} sessions) to {}",
                trace.records.len(),
                spec.n_sessions,
                args.output.display()
            );
            Ok(())
        }
        Command::BuildIndex(args) => {
            let mut trace = workload::load_trace(&args.trace)
                .with_context(|| format!("loading {}", args.trace.display()))?;
            trace.canonicalize_doc_order();
            let contexts: Vec<_> = trace
                .records
                .iter()
                .filter(|r| r.turn == 0)
                .map(|r| r.to_context())
                .collect::<Result<_, _>>()?;
            if contexts.is_empty() {
                bail!("trace has no first-turn contexts to index");
            }
            let mut core =
                gateway::GatewayCore::open(&args.data_dir, GatewayOptions { alpha: args.alpha })?;
            core.seed_index(&contexts, trace.interner)?;
            println!(
                "indexed {} contexts into {} nodes at {}",
                contexts.len(),
                core.index().node_count(),
                args.data_dir.display()
            );
            Ok(())
        }
        Command::Run(args) => {
            let workload = match &args.trace {
                Some(path) => WorkloadSource::TracePath { path: path.clone() },
                None => WorkloadSource::Spec {
                    spec: args.spec.to_spec(args.seed),
                },
            };
            let cfg = ExperimentConfig {
                workload,
                cache: CacheConfig::new(args.capacity)?,
                alpha: args.alpha,
                toggles: Toggles {
                    ordering: !args.no_ordering,
                    scheduling: !args.no_scheduling,
                    dedup: !args.no_dedup,
                    hints: !args.no_hints,
                },
                batch_size: args.batch_size,
                init_batch: args.init_batch,
                scaffold_tokens: args.scaffold,
                output: args.out_dir.clone(),
                seed: args.seed,
            };
            if args.ablation {
                let report = run_ablation(&cfg)?;
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                let out = run_experiment(&cfg)?;
                println!("{}", serde_json::to_string_pretty(&out.summary)?);
            }
            Ok(())
        }
        Command::Serve(args) => {
            let handle = gateway::serve(
                args.bind.as_str(),
                &args.data_dir,
                GatewayOptions { alpha: args.alpha },
            )?;
            println!("listening on {}", handle.addr());
            println!("state directory: {}", args.data_dir.display());
            // Serve until the process is terminated; state persists after
            // every mutation, so a hard stop loses nothing.
            loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            }
        }
        Command::Stats(args) => {
            let trace = workload::load_trace(&args.trace)
                .with_context(|| format!("loading {}", args.trace.display()))?;
            let stats = workload::trace_stats(&trace.records);
            println!("{}", serde_json::to_string_pretty(&stats)?);
            Ok(())
        }
    }
}
