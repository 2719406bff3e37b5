//! Plan execution: batched operator scheduling, cross-query sharing,
//! memoization, statistics and cached results.

mod memo;
mod results;
mod stats;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use memo::MemoStore;
pub use results::{canonical_results, parse_results, render_results, QueryResult, ResultStore};
pub use stats::ExecStats;

use crate::dsl::{Expr, PropRef};
use crate::operators::{Flow, OpError, Operator, TupleRt};
use crate::planner::{OpKind, OpNode, PlanDag};
use crate::registry::Registry;
use crate::trace_io::{batch, content_hash, FrameId, TraceError, TraceRecord, VideoMeta};
use crate::tracker::TrackerConfig;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("link error: {0}")]
    Link(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Operator(#[from] OpError),
    #[error("result store: {0}")]
    Store(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecOptions {
    /// Compute properties on demand and short-circuit conjunctions.
    pub lazy: bool,
    /// Reuse intrinsic values and labels per track.
    pub memo: bool,
    pub batch_size: usize,
    pub seed: u64,
    pub tracker: TrackerConfig,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions { lazy: true, memo: true, batch_size: 64, seed: 0, tracker: TrackerConfig::default() }
    }
}

/// Mutable state visible to operators while a session runs.
pub struct ExecCtx<'a> {
    pub registry: &'a Registry,
    pub meta: &'a VideoMeta,
    pub options: &'a ExecOptions,
    pub memo: MemoStore,
    pub stats: ExecStats,
    /// Operator currently charged for cost units.
    pub op_label: String,
    /// Records of the current batch before any filtering.
    pub raw: Vec<Arc<TraceRecord>>,
    pub results: BTreeMap<String, QueryResult>,
}

impl ExecCtx<'_> {
    pub fn charge(&mut self, cost: f64) {
        self.stats.charge(&self.op_label, cost);
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOutput {
    /// Keyed by query name.
    pub results: BTreeMap<String, QueryResult>,
    pub stats: ExecStats,
    /// Whether every result came from the result store.
    pub cached: bool,
}

impl RunOutput {
    /// Result file contents, statistics trailer included.
    pub fn render(&self) -> String {
        render_results(&self.results, Some(&self.stats))
    }

    pub fn canonical(&self) -> String {
        canonical_results(&self.results)
    }
}

fn sha(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn neutral_exprs(conjuncts: &[Expr], binding: &str) -> Vec<Expr> {
    conjuncts
        .iter()
        .map(|c| {
            c.map_refs(&|r: &PropRef| {
                if r.binding.as_deref() == Some(binding) {
                    PropRef::qualified("_", &r.name)
                } else {
                    r.clone()
                }
            })
        })
        .collect()
}

fn neutral(kind: &OpKind, binding: &str) -> OpKind {
    match kind {
        OpKind::VObjProjector { property, history, .. } => {
            OpKind::VObjProjector { binding: "_".into(), property: property.clone(), history: *history }
        }
        OpKind::VObjFilter { conjuncts, .. } => {
            OpKind::VObjFilter { binding: "_".into(), conjuncts: neutral_exprs(conjuncts, binding) }
        }
        OpKind::Fused { ops } => OpKind::Fused { ops: ops.iter().map(|o| neutral(o, binding)).collect() },
        other => other.clone(),
    }
}

/// What an operator computes, independent of binding names. Operators
/// above the branch level are never shared and sign with their plan.
fn signature(plan: &PlanDag, op: &OpNode) -> String {
    match &op.kind {
        OpKind::VideoReader => "reader".into(),
        OpKind::FrameFilter { filter, classifier, .. } => {
            serde_json::json!({ "frame_filter": filter, "classifier": classifier }).to_string()
        }
        OpKind::ObjectDetector { binding, detector } => {
            let vobj = plan.bindings.get(binding).map(|b| b.vobj.as_str()).unwrap_or_default();
            serde_json::json!({ "detector": detector, "vobj": vobj }).to_string()
        }
        OpKind::ObjectTracker { .. } => "tracker".into(),
        kind => match kind.binding() {
            Some(b) if !matches!(kind, OpKind::Fused { ops } if ops.first().is_some_and(|o| o.binding().is_none())) => {
                serde_json::json!({ "op": neutral(kind, b), "spec": plan.bindings.get(b) }).to_string()
            }
            _ => format!("{}#{}", plan.plan_id, op.id),
        },
    }
}

/// Key of every operator: its signature combined with its inputs' keys.
/// Operators with equal keys compute the same stream and run once.
pub fn chain_keys(plan: &PlanDag) -> Vec<String> {
    let mut keys: Vec<String> = Vec::with_capacity(plan.ops.len());
    for op in &plan.ops {
        let inputs: Vec<&str> = op.inputs.iter().map(|&i| keys[i].as_str()).collect();
        keys.push(sha(&format!("{}|{}", signature(plan, op), inputs.join(","))));
    }
    keys
}

/// Identity of the registrations a plan links against.
pub fn link_fingerprint(plan: &PlanDag, registry: &Registry) -> String {
    let mut parts: BTreeSet<String> = BTreeSet::new();
    fn walk(kind: &OpKind, registry: &Registry, parts: &mut BTreeSet<String>) {
        match kind {
            OpKind::ObjectDetector { detector, .. } => {
                parts.insert(serde_json::to_string(&registry.detector(detector)).expect("serializes"));
            }
            OpKind::FrameFilter { filter, classifier: true, .. } => {
                parts.insert(serde_json::to_string(&registry.classifier(filter)).expect("serializes"));
            }
            OpKind::FrameFilter { filter, .. } => {
                parts.insert(serde_json::to_string(&registry.frame_filter(filter)).expect("serializes"));
            }
            OpKind::Fused { ops } => ops.iter().for_each(|o| walk(o, registry, parts)),
            _ => {}
        }
    }
    for op in &plan.ops {
        walk(&op.kind, registry, &mut parts);
    }
    let specs = plan
        .bindings
        .values()
        .flat_map(|b| b.properties.values())
        .chain(plan.relations.values().flat_map(|r| r.properties.values()));
    for p in specs {
        parts.insert(serde_json::to_string(&registry.property_fn(&p.func.name)).expect("serializes"));
    }
    sha(&parts.into_iter().collect::<Vec<_>>().join("\n"))
}

fn check_calibration(plan: &PlanDag, registry: &Registry, meta: &VideoMeta) -> Result<(), ExecError> {
    if meta.calibration.is_some() {
        return Ok(());
    }
    let specs = plan
        .bindings
        .values()
        .flat_map(|b| b.properties.iter())
        .chain(plan.relations.values().flat_map(|r| r.properties.iter()));
    for (name, p) in specs {
        if let Some(reg) = registry.property_fn(&p.func.name) {
            if reg.implementation.needs_calibration(reg.effective_args(&p.func.args)) {
                return Err(ExecError::Config(format!(
                    "property `{name}` reports meters but the video has no px_per_m calibration"
                )));
            }
        }
    }
    Ok(())
}

struct Node {
    label: String,
    op: Operator,
    inputs: Vec<usize>,
    rt: Arc<TupleRt>,
    /// Accumulates occurrence frames for higher-order consumers.
    collects: bool,
}

/// One or more plans executed over a trace in a single pass. Operators
/// with equal chain keys are merged and run once per batch.
pub struct Session<'a> {
    registry: &'a Registry,
    meta: &'a VideoMeta,
    options: ExecOptions,
    plans: Vec<PlanDag>,
    nodes: Vec<Node>,
    store: Option<ResultStore>,
}

impl<'a> Session<'a> {
    pub fn new(plans: Vec<PlanDag>, registry: &'a Registry, meta: &'a VideoMeta, options: ExecOptions) -> Result<Self, ExecError> {
        if options.batch_size == 0 {
            return Err(ExecError::Config("batch size must be at least 1".into()));
        }
        options.tracker.validate().map_err(|e| ExecError::Config(e.to_string()))?;
        meta.validate()?;
        let mut nodes: Vec<Node> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        for plan in &plans {
            plan.link(registry).map_err(|e| ExecError::Link(e.to_string()))?;
            check_calibration(plan, registry, meta)?;
            let keys = chain_keys(plan);
            let scopes: BTreeMap<String, String> = plan
                .ops
                .iter()
                .filter_map(|o| match &o.kind {
                    OpKind::ObjectTracker { binding } => Some((binding.clone(), keys[o.id].clone())),
                    _ => None,
                })
                .collect();
            let rt = Arc::new(TupleRt::new(plan, &scopes));
            let mut local: Vec<usize> = Vec::with_capacity(plan.ops.len());
            for op in &plan.ops {
                if let Some(&i) = index.get(&keys[op.id]) {
                    local.push(i);
                    continue;
                }
                let id = nodes.len();
                nodes.push(Node {
                    label: format!("{id} {}", op.kind.name()),
                    op: Operator::build(plan, op, registry, &options.tracker)?,
                    inputs: op.inputs.iter().map(|&i| local[i]).collect(),
                    rt: rt.clone(),
                    collects: false,
                });
                index.insert(keys[op.id].clone(), id);
                local.push(id);
            }
        }
        for i in 0..nodes.len() {
            if matches!(nodes[i].op, Operator::Temporal(_)) {
                for j in nodes[i].inputs.clone() {
                    nodes[j].collects = true;
                }
            }
        }
        Ok(Session { registry, meta, options, plans, nodes, store: None })
    }

    /// Serves and records results through `store`.
    pub fn with_store(mut self, store: ResultStore) -> Self {
        self.store = Some(store);
        self
    }

    /// Number of distinct operators after merging.
    pub fn operator_count(&self) -> usize {
        self.nodes.len()
    }

    fn cache_key(&self, plan: &PlanDag, trace_hash: &str) -> String {
        let parts = serde_json::json!({
            "trace": trace_hash,
            "plan": plan.plan_id,
            "link": link_fingerprint(plan, self.registry),
            "seed": self.options.seed,
            "tracker": self.options.tracker,
            "meta": self.meta,
        });
        sha(&parts.to_string())
    }

    /// Executes every plan over `records` (frames in increasing order).
    pub fn run(self, records: &[TraceRecord]) -> Result<RunOutput, ExecError> {
        let keys: Option<Vec<String>> = self.store.as_ref().map(|_| {
            let hash = content_hash(records);
            self.plans.iter().map(|p| self.cache_key(p, &hash)).collect()
        });
        if let (Some(store), Some(keys)) = (&self.store, &keys) {
            let hits: Option<Vec<QueryResult>> = keys.iter().map(|k| store.get(k)).collect();
            if let Some(hits) = hits {
                let results = hits.into_iter().map(|r| (r.query.clone(), r)).collect();
                return Ok(RunOutput { results, stats: ExecStats::default(), cached: true });
            }
        }
        let (store, plans) = (self.store.clone(), self.plans.clone());
        let out = self.execute(records)?;
        if let (Some(store), Some(keys)) = (store, keys) {
            for (plan, key) in plans.iter().zip(keys) {
                if let Some(r) = out.results.get(&plan.query) {
                    store.put(&key, r)?;
                }
            }
        }
        Ok(out)
    }

    fn execute(mut self, records: &[TraceRecord]) -> Result<RunOutput, ExecError> {
        let start = Instant::now();
        let mut ctx = ExecCtx {
            registry: self.registry,
            meta: self.meta,
            options: &self.options,
            memo: MemoStore::new(),
            stats: ExecStats::default(),
            op_label: String::new(),
            raw: Vec::new(),
            results: self
                .plans
                .iter()
                .map(|p| (p.query.clone(), QueryResult { query: p.query.clone(), ..Default::default() }))
                .collect(),
        };
        let n = self.nodes.len();
        let mut consumers = vec![0usize; n];
        for node in &self.nodes {
            for &i in &node.inputs {
                consumers[i] += 1;
            }
        }
        let mut acc: Vec<BTreeSet<FrameId>> = vec![BTreeSet::new(); n];
        for b in batch(records.iter().cloned().map(Ok), self.options.batch_size) {
            let b = b?;
            ctx.stats.frames_read += b.len() as u64;
            ctx.raw = b.records.into_iter().map(Arc::new).collect();
            let mut outs: Vec<Option<Flow>> = vec![None; n];
            let mut remaining = consumers.clone();
            for i in 0..n {
                let mut inputs = Vec::with_capacity(self.nodes[i].inputs.len());
                for &j in &self.nodes[i].inputs {
                    remaining[j] -= 1;
                    let flow = if remaining[j] == 0 { outs[j].take() } else { outs[j].clone() };
                    inputs.push(flow.ok_or_else(|| ExecError::Config(format!("operator {j} produced no output")))?);
                }
                let Node { label, op, rt, collects, .. } = &mut self.nodes[i];
                ctx.op_label.clone_from(label);
                *ctx.stats.operator_invocations.entry(label.clone()).or_default() += 1;
                let out = op.process(&mut ctx, rt, inputs)?;
                if *collects {
                    acc[i].extend(out.frames());
                }
                outs[i] = Some(out);
            }
        }
        let mut finals: Vec<BTreeSet<FrameId>> = Vec::with_capacity(n);
        for i in 0..n {
            let inputs: Vec<BTreeSet<FrameId>> = self.nodes[i].inputs.iter().map(|&j| finals[j].clone()).collect();
            let own = std::mem::take(&mut acc[i]);
            let node = &mut self.nodes[i];
            ctx.op_label.clone_from(&node.label);
            finals.push(node.op.finish(&mut ctx, &inputs, own));
        }
        ctx.stats.wall_seconds = start.elapsed().as_secs_f64();
        Ok(RunOutput { results: ctx.results, stats: ctx.stats, cached: false })
    }
}

/// Executes a single plan.
pub fn run(
    plan: &PlanDag,
    registry: &Registry,
    meta: &VideoMeta,
    records: &[TraceRecord],
    options: &ExecOptions,
) -> Result<RunOutput, ExecError> {
    Session::new(vec![plan.clone()], registry, meta, options.clone())?.run(records)
}
