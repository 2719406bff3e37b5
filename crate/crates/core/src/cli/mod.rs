//! Command-line entry points: `run`, `profile`, `explain`, `synth` and
//! `validate`.
//!
//! Exit codes: 0 success, 1 parse or validation failure, 2 planning
//! failure, 3 runtime failure. Diagnostics go to standard error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsl::{compile, ValidatedProgram};
use crate::executor::{render_results, ExecOptions, ResultStore, Session};
use crate::planner::{
    enumerate_alternatives, plan_query, CostMetric, PlanChoice, PlanDag, PlanOptions, PlannerConfig,
    DEFAULT_ALTERNATIVE_CAP,
};
use crate::registry::Registry;
use crate::synth::{generate, WorldSpec};
use crate::trace_io::{content_hash, open_trace, write_trace, TraceRecord, VideoMeta};
use crate::tracker::TrackerConfig;

#[derive(Debug, Parser)]
#[command(name = "vidq", version, about = "Object-centric queries over video detection traces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plan and execute queries, writing result lines.
    Run(RunArgs),
    /// Profile every candidate plan on the canary and print a table.
    Profile(RunArgs),
    /// Print the selected plan (or every candidate) as a DOT graph.
    Explain(ExplainArgs),
    /// Generate a synthetic world from a world spec file.
    Synth(SynthArgs),
    /// Parse and validate a program.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct ProgramArgs {
    #[arg(long)]
    pub program: PathBuf,
    /// Registry manifest adding detectors, classifiers, frame filters and
    /// property functions to the built-ins.
    #[arg(long)]
    pub registry: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub program: ProgramArgs,
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub meta: PathBuf,
    /// Query to run; repeat to run several in one session. Defaults to the
    /// last top-level query.
    #[arg(long = "query")]
    pub queries: Vec<String>,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.9)]
    pub accuracy_target: f64,
    /// Leading frames used to profile candidate plans.
    #[arg(long, default_value_t = 300)]
    pub canary_frames: usize,
    #[arg(long)]
    pub no_memo: bool,
    #[arg(long)]
    pub no_lazy: bool,
    #[arg(long)]
    pub no_pullup: bool,
    #[arg(long)]
    pub no_fusion: bool,
    /// Rank candidates by measured wall-clock time instead of cost units.
    #[arg(long)]
    pub wall_clock: bool,
    #[arg(long, default_value_t = 0.3)]
    pub iou_threshold: f64,
    #[arg(long, default_value_t = 30)]
    pub max_age: u64,
    #[arg(long, default_value_t = 1)]
    pub min_hits: u32,
    /// Directory of selected plans, reused when the inputs match.
    #[arg(long)]
    pub plan_cache: Option<PathBuf>,
    /// Directory of stored query results, reused for identical runs.
    #[arg(long)]
    pub result_cache: Option<PathBuf>,
    /// Execution statistics as JSON.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Print every candidate instead of the selected plan.
    #[arg(long)]
    pub all: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    pub spec: PathBuf,
    /// Output directory; the trace goes to standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub program: ProgramArgs,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Program(String),
    #[error("{0}")]
    Plan(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Program(_) => 1,
            CliError::Plan(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run(args) => cmd_run(&args),
        Command::Profile(args) => cmd_profile(&args),
        Command::Explain(args) => cmd_explain(&args),
        Command::Synth(args) => cmd_synth(&args),
        Command::Validate(args) => cmd_validate(&args),
    }
}

fn load_program(args: &ProgramArgs) -> Result<(Registry, ValidatedProgram, String), CliError> {
    let registry = match &args.registry {
        Some(p) => Registry::load(p).map_err(|e| CliError::Program(e.to_string()))?,
        None => Registry::with_builtins(),
    };
    let file = args.program.display().to_string();
    let src = std::fs::read_to_string(&args.program).map_err(|e| CliError::Program(format!("{file}: {e}")))?;
    let vp = compile(&src, &registry).map_err(|e| CliError::Program(e.render(&file)))?;
    Ok((registry, vp, src))
}

struct Inputs {
    registry: Registry,
    vp: ValidatedProgram,
    source: String,
    meta: VideoMeta,
    trace: Vec<TraceRecord>,
    queries: Vec<String>,
}

fn load_inputs(args: &RunArgs) -> Result<Inputs, CliError> {
    let (registry, vp, source) = load_program(&args.program)?;
    let queries = if args.queries.is_empty() {
        vec![vp.default_query().ok_or_else(|| CliError::Plan("program declares no queries".into()))?.to_string()]
    } else {
        args.queries.clone()
    };
    for q in &queries {
        if vp.query(q).is_none() {
            return Err(CliError::Plan(format!("no query named `{q}`")));
        }
    }
    let meta = VideoMeta::load(&args.meta).map_err(|e| CliError::Runtime(e.to_string()))?;
    meta.validate().map_err(|e| CliError::Runtime(e.to_string()))?;
    let trace: Vec<TraceRecord> = open_trace(&args.trace)
        .map_err(|e| CliError::Runtime(e.to_string()))?
        .with_bounds(&meta)
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Runtime(format!("{}: {e}", args.trace.display())))?;
    Ok(Inputs { registry, vp, source, meta, trace, queries })
}

fn exec_options(args: &RunArgs) -> ExecOptions {
    ExecOptions {
        lazy: !args.no_lazy,
        memo: !args.no_memo,
        batch_size: args.batch_size,
        seed: args.seed,
        tracker: TrackerConfig {
            iou_threshold: args.iou_threshold,
            max_age: args.max_age,
            min_hits: args.min_hits,
            ..TrackerConfig::default()
        },
    }
}

fn planner_config(args: &RunArgs) -> PlannerConfig {
    PlannerConfig {
        accuracy_target: args.accuracy_target,
        options: PlanOptions { pullup: !args.no_pullup, fusion: !args.no_fusion, memo: !args.no_memo },
        alternative_cap: DEFAULT_ALTERNATIVE_CAP,
        cost_metric: if args.wall_clock { CostMetric::WallClock } else { CostMetric::Counted },
    }
}

fn canary<'a>(args: &RunArgs, trace: &'a [TraceRecord]) -> &'a [TraceRecord] {
    &trace[..args.canary_frames.min(trace.len())]
}

fn choose(args: &RunArgs, inputs: &Inputs, query: &str) -> Result<PlanChoice, CliError> {
    plan_query(
        &inputs.vp,
        &inputs.registry,
        query,
        &inputs.meta,
        canary(args, &inputs.trace),
        &planner_config(args),
        &exec_options(args),
    )
    .map_err(|e| CliError::Plan(format!("{query}: {e}")))
}

/// Key of a cached plan: everything that can change the selection.
fn plan_cache_key(args: &RunArgs, inputs: &Inputs, query: &str) -> Result<String, CliError> {
    let registry = match &args.program.registry {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Program(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let config = planner_config(args);
    let parts = serde_json::json!({
        "program": inputs.source,
        "query": query,
        "registry": registry,
        "canary": content_hash(canary(args, &inputs.trace)),
        "meta": inputs.meta,
        "target": config.accuracy_target,
        "options": [config.options.pullup, config.options.fusion, config.options.memo],
        "wall_clock": args.wall_clock,
        "exec": [args.no_lazy, args.batch_size as u64, args.seed],
        "tracker": exec_options(args).tracker,
    });
    Ok(hex::encode(Sha256::digest(parts.to_string().as_bytes())))
}

fn cached_plan(dir: &Path, key: &str, registry: &Registry, query: &str) -> Option<PlanDag> {
    let path = dir.join(format!("{key}.json"));
    if !path.exists() {
        return None;
    }
    match PlanDag::load(&path) {
        Ok(plan) if plan.query == query && plan.check().is_ok() && plan.link(registry).is_ok() => Some(plan),
        Ok(_) => {
            log::warn!("ignoring incompatible cached plan {}", path.display());
            None
        }
        Err(e) => {
            log::warn!("ignoring cached plan {}: {e}", path.display());
            None
        }
    }
}

fn selected_plan(args: &RunArgs, inputs: &Inputs, query: &str) -> Result<PlanDag, CliError> {
    let Some(dir) = &args.plan_cache else {
        return Ok(choose(args, inputs, query)?.plan);
    };
    let key = plan_cache_key(args, inputs, query)?;
    if let Some(plan) = cached_plan(dir, &key, &inputs.registry, query) {
        log::info!("{query}: using cached plan {}", plan.plan_id);
        return Ok(plan);
    }
    let plan = choose(args, inputs, query)?.plan;
    std::fs::create_dir_all(dir).map_err(|e| CliError::Plan(format!("{}: {e}", dir.display())))?;
    plan.save(dir.join(format!("{key}.json"))).map_err(|e| CliError::Plan(e.to_string()))?;
    Ok(plan)
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(|e| CliError::Runtime(e.to_string()))
        }
    }
}

fn check_args(args: &RunArgs) -> Result<(), CliError> {
    if args.batch_size == 0 {
        return Err(CliError::Runtime("batch size must be at least 1".into()));
    }
    if args.canary_frames == 0 {
        return Err(CliError::Plan("canary must contain at least one frame".into()));
    }
    Ok(())
}

pub fn cmd_run(args: &RunArgs) -> Result<(), CliError> {
    check_args(args)?;
    let inputs = load_inputs(args)?;
    let plans = inputs.queries.iter().map(|q| selected_plan(args, &inputs, q)).collect::<Result<Vec<_>, _>>()?;
    let mut session =
        Session::new(plans, &inputs.registry, &inputs.meta, exec_options(args)).map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(dir) = &args.result_cache {
        session = session.with_store(ResultStore::open(dir).map_err(|e| CliError::Runtime(e.to_string()))?);
    }
    let out = session.run(&inputs.trace).map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(path) = &args.stats {
        let text = serde_json::to_string_pretty(&out.stats).expect("stats serialize") + "\n";
        std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    }
    emit(args.out.as_deref(), &render_results(&out.results, None))
}

pub fn cmd_profile(args: &RunArgs) -> Result<(), CliError> {
    check_args(args)?;
    let inputs = load_inputs(args)?;
    let mut text = String::new();
    for q in &inputs.queries {
        let choice = choose(args, &inputs, q)?;
        text.push_str(&format!("query {q} (reference positives: {})\n", choice.reports.first().map_or(0, |r| r.reference_positives.len())));
        text.push_str(&format!("{:<3} {:<12} {:<40} {:>8} {:>12} {:>4}\n", "", "plan", "alternative", "f1", "cost", "ops"));
        for (i, r) in choice.reports.iter().enumerate() {
            let mark = if choice.selection.index == Some(i) { "*" } else { "" };
            text.push_str(&format!(
                "{:<3} {:<12} {:<40} {:>8.4} {:>12.2} {:>4}\n",
                mark,
                &r.plan_id[..12.min(r.plan_id.len())],
                r.label,
                r.f1,
                r.cost,
                r.operators
            ));
        }
        if let Some(w) = &choice.selection.warning {
            text.push_str(&format!("warning: {w}\n"));
        }
    }
    emit(args.out.as_deref(), &text)
}

pub fn cmd_explain(args: &ExplainArgs) -> Result<(), CliError> {
    let run = &args.run;
    check_args(run)?;
    let inputs = load_inputs(run)?;
    let mut text = String::new();
    for q in &inputs.queries {
        if args.all {
            let candidates = enumerate_alternatives(&inputs.vp, &inputs.registry, q, inputs.meta.fps, &planner_config(run))
                .map_err(|e| CliError::Plan(format!("{q}: {e}")))?;
            for plan in candidates {
                text.push_str(&plan.to_dot(None));
            }
        } else {
            text.push_str(&selected_plan(run, &inputs, q)?.to_dot(None));
        }
    }
    emit(run.out.as_deref(), &text)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let spec = WorldSpec::load(&args.spec).map_err(|e| CliError::Program(e.to_string()))?;
    let world = generate(&spec).map_err(|e| CliError::Program(e.to_string()))?;
    match &args.out {
        Some(dir) => world.save(dir).map_err(|e| CliError::Runtime(e.to_string())),
        None => write_trace(std::io::stdout().lock(), &world.trace).map_err(|e| CliError::Runtime(e.to_string())),
    }
}

pub fn cmd_validate(args: &ValidateArgs) -> Result<(), CliError> {
    let (_, vp, _) = load_program(&args.program)?;
    println!("ok: {} queries ({})", vp.query_order.len(), vp.query_order.join(", "));
    Ok(())
}
