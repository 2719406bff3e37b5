//! Per-operator runtime state and batch processing.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use serde_json::{json, Map, Value as Json};
use thiserror::Error;

use super::eval::{eval_expr, materialize, node_property, window_key, BindingRt, RelationRt, Truth, TupleView};
use super::higher_order::{temporal_witnesses, DurationTracker, VideoAggregator};
use super::{Flow, TupleSet};
use crate::datamodel::{FrameGraph, NodeId, Track, VObjInstance, Value};
use crate::dsl::{Expr, OutputRef, Quantifier, VideoOutput};
use crate::executor::ExecCtx;
use crate::planner::{conjunct_key, OpKind, OpNode, PlanDag};
use crate::registry::{ClassifierReg, DetectorReg, FrameFilterKind, FrameFilterReg, Registry, SCENE_DETECTOR};
use crate::trace_io::{FrameId, TraceRecord};
use crate::tracker::{Tracker, TrackerConfig};

#[derive(Debug, Error)]
pub enum OpError {
    #[error("operator configuration: {0}")]
    Config(String),
    #[error("{op}: unexpected input ({detail})")]
    Input { op: String, detail: String },
}

fn bad_input(op: &str, flow: &Flow) -> OpError {
    let detail = match flow {
        Flow::Frames(_) => "frames",
        Flow::Branch(_) => "branch",
        Flow::Tuples(_) => "tuples",
        Flow::Occurrences(_) => "occurrences",
    };
    OpError::Input { op: op.to_string(), detail: detail.to_string() }
}

/// Binding and relation contexts shared by the operators of one plan.
#[derive(Clone, Debug, Default)]
pub struct TupleRt {
    pub bindings: BTreeMap<String, BindingRt>,
    pub relations: BTreeMap<String, RelationRt>,
}

impl TupleRt {
    /// `scopes` maps each tracked binding to its memo namespace.
    pub fn new(plan: &PlanDag, scopes: &BTreeMap<String, String>) -> Self {
        TupleRt {
            bindings: plan
                .bindings
                .iter()
                .map(|(n, s)| (n.clone(), BindingRt::new(n, s.clone(), scopes.get(n).cloned().unwrap_or_default())))
                .collect(),
            relations: plan
                .relations
                .iter()
                .map(|(n, s)| (n.clone(), RelationRt { name: n.clone(), spec: s.clone() }))
                .collect(),
        }
    }
}

/// Strips the `{query}/` prefix of nested bindings for display.
fn display_name(binding: &str) -> &str {
    binding.rsplit('/').next().unwrap_or(binding)
}

fn record_conjunct(ctx: &mut ExecCtx, key: &str, passed: bool, cost: f64) {
    let stat = ctx.stats.conjuncts.entry(key.to_string()).or_default();
    stat.evaluated += 1;
    stat.passed += u64::from(passed);
    stat.cost += cost;
}

/// Evaluates one conjunct on a node, through the label memo when the
/// conjunct reads only intrinsic properties.
fn node_conjunct(
    ctx: &mut ExecCtx,
    rt: &BindingRt,
    node: &mut VObjInstance,
    channels: &BTreeMap<String, f64>,
    conjunct: &Expr,
) -> bool {
    let key = conjunct_key(std::slice::from_ref(conjunct));
    let label = match node.track_id {
        Some(track) if ctx.options.memo => rt.label_key(conjunct).map(|k| (track, k)),
        _ => None,
    };
    if let Some((track, k)) = &label {
        if let Some(hit) = ctx.memo.label(&rt.scope, *track, k) {
            ctx.stats.memo_hits += 1;
            record_conjunct(ctx, &key, hit, 0.0);
            return hit;
        }
    }
    let before = ctx.stats.cost_units;
    let lazy = ctx.options.lazy;
    let truth = eval_expr(conjunct, lazy, &mut |r| {
        if r.binding.as_deref().is_none_or(|b| b == rt.name) {
            node_property(ctx, rt, node, channels, &r.name)
        } else {
            Value::Undefined
        }
    });
    if let (Some((track, k)), false) = (&label, truth == Truth::Unknown) {
        ctx.memo.insert_label(&rt.scope, *track, k, truth.holds());
    }
    let cost = ctx.stats.cost_units - before;
    record_conjunct(ctx, &key, truth.holds(), cost);
    truth.holds()
}

/// Evaluates a filter's conjuncts in order; lazily stops at the first failure.
fn node_filter(
    ctx: &mut ExecCtx,
    rt: &BindingRt,
    node: &mut VObjInstance,
    channels: &BTreeMap<String, f64>,
    conjuncts: &[Expr],
) -> bool {
    let mut pass = true;
    for c in conjuncts {
        if !node_conjunct(ctx, rt, node, channels, c) {
            pass = false;
            if ctx.options.lazy {
                break;
            }
        }
    }
    pass
}

fn drop_empty_frames(g: &mut FrameGraph) {
    let alive: BTreeSet<FrameId> = g.nodes.keys().map(|n| n.frame).collect();
    g.frames.retain(|f, _| alive.contains(f));
}

#[derive(Clone, Debug)]
enum Step {
    Project,
    Filter(Vec<Expr>),
}

/// Projectors and filters of one branch, run node by node.
#[derive(Clone, Debug)]
pub struct BranchChain {
    binding: String,
    steps: Vec<Step>,
}

impl BranchChain {
    fn run(&self, ctx: &mut ExecCtx, rt: &TupleRt, mut g: FrameGraph) -> Result<FrameGraph, OpError> {
        let brt = rt
            .bindings
            .get(&self.binding)
            .ok_or_else(|| OpError::Config(format!("unknown binding `{}`", self.binding)))?;
        let eager = !ctx.options.lazy;
        let mut dead = Vec::new();
        {
            let FrameGraph { frames, nodes, .. } = &mut g;
            for (id, node) in nodes.iter_mut() {
                let channels = &frames[&id.frame].channels;
                for step in &self.steps {
                    if eager {
                        materialize(ctx, brt, node, channels);
                    }
                    if let Step::Filter(cs) = step {
                        if !node_filter(ctx, brt, node, channels, cs) {
                            dead.push(*id);
                            break;
                        }
                    }
                }
            }
        }
        for id in dead {
            g.remove_node(id);
        }
        drop_empty_frames(&mut g);
        Ok(g)
    }
}

/// Forced computation of a property on every node; for stateful
/// properties also records the dependency windows per track.
#[derive(Clone, Debug)]
pub struct HistoryOp {
    binding: String,
    property: String,
    tracks: BTreeMap<u64, Track>,
}

impl HistoryOp {
    fn run(&mut self, ctx: &mut ExecCtx, rt: &TupleRt, mut g: FrameGraph) -> Result<FrameGraph, OpError> {
        let brt = rt
            .bindings
            .get(&self.binding)
            .ok_or_else(|| OpError::Config(format!("unknown binding `{}`", self.binding)))?;
        let spec = brt
            .spec
            .properties
            .get(&self.property)
            .ok_or_else(|| OpError::Config(format!("binding `{}` has no property `{}`", self.binding, self.property)))?;
        let FrameGraph { frames, nodes, .. } = &mut g;
        for (id, node) in nodes.iter_mut() {
            let channels = &frames[&id.frame].channels;
            let Some(window) = spec.window() else {
                node_property(ctx, brt, node, channels, &self.property);
                continue;
            };
            let values: Vec<Value> =
                spec.deps.iter().map(|d| node_property(ctx, brt, node, channels, &d.name)).collect();
            let Some(track_id) = node.track_id else { continue };
            let keys: Vec<String> = (0..values.len()).map(|i| window_key(&self.property, i)).collect();
            let track = self.tracks.entry(track_id).or_insert_with(|| {
                Track::new(track_id, &node.class_name, keys.iter().map(|k| (k.clone(), window)).collect())
            });
            for (k, v) in keys.iter().zip(values) {
                track.push(k, v, id.frame).expect("history declared for every dependency");
            }
            for k in &keys {
                if let Ok(Some(w)) = track.window(k, window) {
                    node.windows.insert(k.clone(), w);
                }
            }
        }
        Ok(g)
    }
}

#[derive(Clone, Debug)]
enum TupleStep {
    Project { relation: String, property: String, history: Option<BTreeMap<Vec<u64>, Track>> },
    Filter(Vec<Expr>),
}

/// Relation projectors and tuple-level filters of one unit.
#[derive(Clone, Debug)]
pub struct TupleChain {
    steps: Vec<TupleStep>,
}

fn materialize_tuple(ctx: &mut ExecCtx, view: &mut TupleView, layout: &[String], tuple: &[NodeId]) {
    for (b, id) in layout.iter().zip(tuple) {
        if let Some(rt) = view.bindings.get(b) {
            for p in &rt.spec.order {
                view.node_value(ctx, b, *id, p);
            }
        }
    }
    let relations: Vec<(String, Vec<String>)> =
        view.relations.iter().map(|(n, r)| (n.clone(), r.spec.order.clone())).collect();
    for (rel, order) in relations {
        if let Some(parts) = view.participants(&rel, layout, tuple) {
            for p in &order {
                view.edge_value(ctx, &rel, &parts, p);
            }
        }
    }
}

fn record_relation(
    ctx: &mut ExecCtx,
    view: &mut TupleView,
    history: &mut BTreeMap<Vec<u64>, Track>,
    relation: &str,
    property: &str,
    layout: &[String],
    tuple: &[NodeId],
    frame: FrameId,
) {
    let Some(rrt) = view.relations.get(relation) else { return };
    let spec = rrt.spec.clone();
    let Some(pspec) = spec.properties.get(property) else { return };
    let Some(window) = pspec.window() else { return };
    let Some(parts) = view.participants(relation, layout, tuple) else { return };
    let key: Option<Vec<u64>> = parts
        .iter()
        .zip(&spec.participants)
        .map(|(id, b)| view.branches.get(b).and_then(|g| g.nodes.get(id)).and_then(|n| n.track_id))
        .collect();
    let Some(key) = key else { return };
    let wkeys: Vec<String> = (0..pspec.deps.len()).map(|i| window_key(property, i)).collect();
    let seen = history.get(&key).is_some_and(|t| t.last_seen == frame && t.history_len(&wkeys[0]) > 0);
    if !seen {
        let values: Vec<Value> =
            pspec.deps.iter().map(|d| view.dep_value(ctx, &spec, relation, &parts, d)).collect();
        let track = history
            .entry(key.clone())
            .or_insert_with(|| Track::new(0, relation, wkeys.iter().map(|k| (k.clone(), window)).collect()));
        for (k, v) in wkeys.iter().zip(values) {
            track.push(k, v, frame).expect("history declared for every dependency");
        }
    }
    let track = &history[&key];
    view.ensure_edge(relation, &parts);
    let edge = view.edges.get_mut(&(relation.to_string(), parts.clone())).expect("edge ensured");
    for k in &wkeys {
        if let Ok(Some(w)) = track.window(k, window) {
            edge.windows.insert(k.clone(), w);
        }
    }
}

fn tuple_filter(ctx: &mut ExecCtx, view: &mut TupleView, layout: &[String], tuple: &[NodeId], conjuncts: &[Expr]) -> bool {
    let mut pass = true;
    for c in conjuncts {
        let before = ctx.stats.cost_units;
        let lazy = ctx.options.lazy;
        let truth = eval_expr(c, lazy, &mut |r| view.resolve(ctx, layout, tuple, r));
        let cost = ctx.stats.cost_units - before;
        record_conjunct(ctx, &conjunct_key(std::slice::from_ref(c)), truth.holds(), cost);
        if !truth.holds() {
            pass = false;
            if lazy {
                break;
            }
        }
    }
    pass
}

impl TupleChain {
    fn run(&mut self, ctx: &mut ExecCtx, rt: &TupleRt, mut ts: TupleSet) -> Result<TupleSet, OpError> {
        let eager = !ctx.options.lazy;
        {
            let TupleSet { frames, bindings: layout, branches, tuples, edges } = &mut ts;
            for (f, list) in tuples.iter_mut() {
                let channels = &frames[f].channels;
                let mut view = TupleView {
                    branches: &mut *branches,
                    edges: &mut *edges,
                    bindings: &rt.bindings,
                    relations: &rt.relations,
                    channels,
                };
                let steps = &mut self.steps;
                list.retain(|tuple| {
                    for step in steps.iter_mut() {
                        if eager {
                            materialize_tuple(ctx, &mut view, layout, tuple);
                        }
                        match step {
                            TupleStep::Project { relation, property, history: Some(h) } => {
                                record_relation(ctx, &mut view, h, relation, property, layout, tuple, *f)
                            }
                            TupleStep::Project { .. } => {}
                            TupleStep::Filter(cs) => {
                                if !tuple_filter(ctx, &mut view, layout, tuple, cs) {
                                    return false;
                                }
                            }
                        }
                    }
                    true
                });
            }
        }
        ts.prune();
        Ok(ts)
    }
}

#[derive(Clone, Debug)]
pub struct FrameFilterOp {
    name: String,
    classifier: Option<ClassifierReg>,
    filter: Option<FrameFilterReg>,
    /// Channel values of the most recent raw frames.
    recent: VecDeque<f64>,
}

impl FrameFilterOp {
    fn channel(record: &TraceRecord, channel: &str, name: &str) -> Result<f64, OpError> {
        record.channels.get(channel).copied().ok_or_else(|| {
            OpError::Config(format!("frame filter `{name}` needs channel `{channel}` missing on frame {}", record.frame_id))
        })
    }

    /// Alive frames among `alive` that pass.
    fn keep(&mut self, ctx: &mut ExecCtx, alive: &BTreeSet<FrameId>) -> Result<BTreeSet<FrameId>, OpError> {
        let mut keep = BTreeSet::new();
        if let Some(c) = &self.classifier {
            for rec in ctx.raw.clone().iter().filter(|r| alive.contains(&r.frame_id)) {
                *ctx.stats.classifier_invocations.entry(self.name.clone()).or_default() += 1;
                ctx.charge(c.cost);
                if ctx.registry.classify_frame(c, rec, ctx.options.seed) {
                    keep.insert(rec.frame_id);
                }
            }
            return Ok(keep);
        }
        let reg = self.filter.clone().expect("filter or classifier");
        for rec in ctx.raw.clone().iter() {
            let value = Self::channel(rec, reg.kind.channel(), &self.name)?;
            if alive.contains(&rec.frame_id) {
                *ctx.stats.frame_filter_invocations.entry(self.name.clone()).or_default() += 1;
                ctx.charge(reg.cost);
                let pass = match &reg.kind {
                    FrameFilterKind::SimilarToPrev { tolerance, .. } => {
                        self.recent.is_empty() || !self.recent.iter().any(|p| (p - value).abs() <= *tolerance)
                    }
                    FrameFilterKind::ChannelThreshold { op, value: threshold, .. } => op.holds(value, *threshold),
                };
                if pass {
                    keep.insert(rec.frame_id);
                }
            }
            if let FrameFilterKind::SimilarToPrev { window, .. } = &reg.kind {
                self.recent.push_back(value);
                while self.recent.len() > *window {
                    self.recent.pop_front();
                }
            }
        }
        Ok(keep)
    }
}

#[derive(Clone, Debug)]
pub struct DetectorOp {
    vobj: String,
    reg: DetectorReg,
}

impl DetectorOp {
    fn run(&self, ctx: &mut ExecCtx, frames: BTreeMap<FrameId, Arc<TraceRecord>>) -> FrameGraph {
        let first = frames.keys().next().copied().unwrap_or(0);
        let last = frames.keys().next_back().copied().unwrap_or(0);
        let mut g = FrameGraph::empty((first, last));
        for (f, rec) in frames {
            *ctx.stats.detector_invocations.entry(self.reg.name.clone()).or_default() += 1;
            ctx.charge(self.reg.cost);
            let found: Vec<(NodeId, &crate::trace_io::Detection)>;
            let scene;
            if self.reg.name == SCENE_DETECTOR {
                scene = Registry::scene_detection(&rec, f64::from(ctx.meta.width), f64::from(ctx.meta.height));
                found = vec![(scene.0, &scene.1)];
            } else {
                found = ctx
                    .registry
                    .detect(&self.reg, &rec, ctx.options.seed)
                    .into_iter()
                    .map(|(i, d)| (NodeId::new(f, i), d))
                    .collect();
            }
            if found.is_empty() {
                continue;
            }
            for (id, d) in found {
                let mut node = VObjInstance::new(id, &self.vobj, &d.class_name, d.bbox, d.score);
                node.attrs = d.attrs.clone();
                g.add_node(node);
            }
            g.frames.insert(f, rec);
        }
        g
    }
}

#[derive(Clone, Debug)]
pub struct TrackerOp {
    tracker: Tracker,
    scene: bool,
}

impl TrackerOp {
    fn run(&mut self, mut g: FrameGraph) -> FrameGraph {
        let frames: Vec<FrameId> = g.frames.keys().copied().collect();
        for f in frames {
            let dets: Vec<(NodeId, crate::datamodel::BBox)> = g.nodes_in_frame(f).map(|n| (n.node_id, n.bbox)).collect();
            if self.scene {
                for (id, _) in dets {
                    g.nodes.get_mut(&id).expect("node").track_id = Some(0);
                }
                continue;
            }
            let out = self.tracker.step(f, &dets);
            for (id, track) in out.assignments {
                g.nodes.get_mut(&id).expect("node").track_id = Some(track);
            }
        }
        g
    }
}

#[derive(Clone, Debug)]
pub struct SinkOp {
    query: String,
    bindings: Vec<String>,
    outputs: Vec<OutputRef>,
    emit: bool,
}

impl SinkOp {
    fn run(&self, ctx: &mut ExecCtx, rt: &TupleRt, input: Flow) -> Result<TupleSet, OpError> {
        let mut ts = match input {
            Flow::Branch(g) => TupleSet::from_branch(&self.bindings[0], g),
            Flow::Tuples(t) => t,
            other => return Err(bad_input("Sink", &other)),
        };
        if !self.emit {
            return Ok(ts);
        }
        let mut lines = Vec::new();
        {
            let TupleSet { frames, bindings: layout, branches, tuples, edges } = &mut ts;
            for (f, list) in tuples.iter() {
                let mut view = TupleView {
                    branches: &mut *branches,
                    edges: &mut *edges,
                    bindings: &rt.bindings,
                    relations: &rt.relations,
                    channels: &frames[f].channels,
                };
                let matches: Vec<Json> = list.iter().map(|t| self.entry(ctx, &mut view, layout, t)).collect();
                lines.push((*f, matches));
            }
        }
        let result = ctx.results.entry(self.query.clone()).or_default();
        result.query = self.query.clone();
        for (f, matches) in lines {
            let mut line = Map::new();
            line.insert("matches".into(), Json::Array(matches));
            result.frames.insert(f, line);
            ctx.stats.frames_emitted += 1;
        }
        Ok(ts)
    }

    fn entry(&self, ctx: &mut ExecCtx, view: &mut TupleView, layout: &[String], tuple: &[NodeId]) -> Json {
        let mut out = Map::new();
        for (b, id) in layout.iter().zip(tuple) {
            out.insert(display_name(b).to_string(), json!({ "node": id.to_string() }));
        }
        for o in &self.outputs {
            let name = display_name(&o.binding).to_string();
            if let Some(i) = layout.iter().position(|b| *b == o.binding) {
                if let Some(p) = &o.property {
                    let v = view.node_value(ctx, &o.binding, tuple[i], p);
                    out.get_mut(&name).and_then(Json::as_object_mut).expect("binding entry").insert(p.clone(), to_json(&v));
                }
            } else if let Some(parts) = view.participants(&o.binding, layout, tuple) {
                let entry = out.entry(name).or_insert_with(|| {
                    json!({ "nodes": parts.iter().map(ToString::to_string).collect::<Vec<_>>() })
                });
                if let Some(p) = &o.property {
                    let v = view.edge_value(ctx, &o.binding, &parts, p);
                    entry.as_object_mut().expect("relation entry").insert(p.clone(), to_json(&v));
                }
            }
        }
        Json::Object(out)
    }
}

fn to_json(v: &Value) -> Json {
    serde_json::to_value(v).expect("values serialize")
}

#[derive(Clone, Debug)]
pub struct AggregateOp {
    query: String,
    subject: String,
    quantifier: Quantifier,
    predicate: Expr,
    output: VideoOutput,
    agg: VideoAggregator,
}

impl AggregateOp {
    fn run(&mut self, ctx: &mut ExecCtx, rt: &TupleRt, input: Flow) -> Result<(), OpError> {
        let Flow::Tuples(mut ts) = input else { return Err(bad_input("VideoAggregate", &input)) };
        let TupleSet { frames, bindings: layout, branches, tuples, edges } = &mut ts;
        let Some(pos) = layout.iter().position(|b| *b == self.subject) else {
            return Err(OpError::Config(format!("video subject `{}` is not bound", self.subject)));
        };
        for (f, list) in tuples.iter() {
            let mut view = TupleView {
                branches: &mut *branches,
                edges: &mut *edges,
                bindings: &rt.bindings,
                relations: &rt.relations,
                channels: &frames[f].channels,
            };
            for t in list {
                let track = view.branches.get(&self.subject).and_then(|g| g.nodes.get(&t[pos])).and_then(|n| n.track_id);
                let Some(track) = track else { continue };
                let lazy = ctx.options.lazy;
                let truth = eval_expr(&self.predicate, lazy, &mut |r| view.resolve(ctx, layout, t, r));
                self.agg.observe(track, truth);
            }
        }
        Ok(())
    }

    fn finish(&self, ctx: &mut ExecCtx) {
        let tracks = self.agg.satisfying(self.quantifier);
        let mut video = Map::new();
        video.insert("count".into(), json!(tracks.len()));
        if self.output == VideoOutput::Tracks {
            video.insert("tracks".into(), json!(tracks));
        }
        let result = ctx.results.entry(self.query.clone()).or_default();
        result.query = self.query.clone();
        result.video = Some(Json::Object(video));
    }
}

#[derive(Clone, Debug)]
pub struct DurationOp {
    query: String,
    keys: Vec<String>,
    emit: bool,
    tracker: DurationTracker,
}

impl DurationOp {
    fn run(&mut self, ctx: &mut ExecCtx, input: Flow) -> Result<BTreeSet<FrameId>, OpError> {
        let Flow::Tuples(ts) = input else { return Err(bad_input("DurationEval", &input)) };
        let positions: Vec<usize> = self
            .keys
            .iter()
            .map(|k| ts.bindings.iter().position(|b| b == k))
            .collect::<Option<_>>()
            .ok_or_else(|| OpError::Config("duration keys are not bound by the base query".into()))?;
        let mut fired = BTreeSet::new();
        for (f, list) in &ts.tuples {
            let mut matches = Vec::new();
            for t in list {
                let key: Option<Vec<u64>> = positions
                    .iter()
                    .map(|&i| ts.branches.get(&ts.bindings[i]).and_then(|g| g.nodes.get(&t[i])).and_then(|n| n.track_id))
                    .collect();
                let Some(key) = key else { continue };
                if self.tracker.observe(&key, *f) {
                    let mut tracks = Map::new();
                    let mut nodes = Map::new();
                    for (n, &i) in positions.iter().enumerate() {
                        let name = display_name(&self.keys[n]).to_string();
                        tracks.insert(name.clone(), json!(key[n]));
                        nodes.insert(name, json!(t[i].to_string()));
                    }
                    matches.push(json!({ "tracks": tracks, "nodes": nodes }));
                }
            }
            if !matches.is_empty() {
                fired.insert(*f);
                if self.emit {
                    let result = ctx.results.entry(self.query.clone()).or_default();
                    result.query = self.query.clone();
                    let mut line = Map::new();
                    line.insert("matches".into(), Json::Array(matches));
                    result.frames.insert(*f, line);
                    ctx.stats.frames_emitted += 1;
                }
            }
        }
        Ok(fired)
    }
}

#[derive(Clone, Debug)]
pub struct TemporalOp {
    query: String,
    within: u64,
    emit: bool,
}

impl TemporalOp {
    fn finish(&self, ctx: &mut ExecCtx, first: &BTreeSet<FrameId>, then: &BTreeSet<FrameId>) -> BTreeSet<FrameId> {
        let witnesses = temporal_witnesses(first, then, self.within);
        let occurrences: BTreeSet<FrameId> = witnesses.iter().map(|w| w.1).collect();
        if self.emit {
            let result = ctx.results.entry(self.query.clone()).or_default();
            result.query = self.query.clone();
            for f in &occurrences {
                let own: Vec<Json> = witnesses.iter().filter(|w| w.1 == *f).map(|w| json!([w.0, w.1])).collect();
                let mut line = Map::new();
                line.insert("witnesses".into(), Json::Array(own));
                result.frames.insert(*f, line);
                ctx.stats.frames_emitted += 1;
            }
            result.video = Some(json!({
                "holds": !witnesses.is_empty(),
                "witnesses": witnesses.iter().map(|w| json!([w.0, w.1])).collect::<Vec<_>>(),
            }));
        }
        occurrences
    }
}

/// An executable operator with its cross-batch state.
#[derive(Clone, Debug)]
pub enum Operator {
    Reader,
    FrameFilter(FrameFilterOp),
    Detector(DetectorOp),
    Tracker(TrackerOp),
    History(HistoryOp),
    Branch(BranchChain),
    Join(Vec<String>),
    Tuples(TupleChain),
    Sink(SinkOp),
    Aggregate(AggregateOp),
    Duration(DurationOp),
    Temporal(TemporalOp),
}

fn branch_steps(kinds: &[OpKind]) -> Option<(String, Vec<Step>)> {
    let binding = kinds.first()?.binding()?.to_string();
    let steps = kinds
        .iter()
        .map(|k| match k {
            OpKind::VObjProjector { history: false, .. } => Some(Step::Project),
            OpKind::VObjFilter { conjuncts, .. } => Some(Step::Filter(conjuncts.clone())),
            _ => None,
        })
        .collect::<Option<Vec<_>>>()?;
    Some((binding, steps))
}

fn tuple_steps(plan: &PlanDag, kinds: &[OpKind]) -> Option<Vec<TupleStep>> {
    kinds
        .iter()
        .map(|k| match k {
            OpKind::RelationProjector { relation, property, .. } => {
                let stateful = plan
                    .relations
                    .get(relation)
                    .and_then(|r| r.properties.get(property))
                    .is_some_and(|p| p.is_stateful());
                Some(TupleStep::Project {
                    relation: relation.clone(),
                    property: property.clone(),
                    history: stateful.then(BTreeMap::new),
                })
            }
            OpKind::RelationFilter { conjuncts, .. } => Some(TupleStep::Filter(conjuncts.clone())),
            _ => None,
        })
        .collect()
}

impl Operator {
    pub fn build(plan: &PlanDag, op: &OpNode, registry: &Registry, tracker: &TrackerConfig) -> Result<Operator, OpError> {
        let malformed = || OpError::Config(format!("malformed operator {}: {}", op.id, op.kind.describe()));
        Ok(match &op.kind {
            OpKind::VideoReader => Operator::Reader,
            OpKind::FrameFilter { filter, classifier, .. } => {
                let (c, f) = if *classifier {
                    let c = registry.classifier(filter).ok_or_else(|| OpError::Config(format!("unregistered classifier `{filter}`")))?;
                    (Some(c.clone()), None)
                } else {
                    let f = registry
                        .frame_filter(filter)
                        .ok_or_else(|| OpError::Config(format!("unregistered frame filter `{filter}`")))?;
                    (None, Some(f.clone()))
                };
                Operator::FrameFilter(FrameFilterOp { name: filter.clone(), classifier: c, filter: f, recent: VecDeque::new() })
            }
            OpKind::ObjectDetector { binding, detector } => {
                let reg = registry.detector(detector).ok_or_else(|| OpError::Config(format!("unregistered detector `{detector}`")))?;
                let vobj = plan.bindings.get(binding).map(|b| b.vobj.clone()).ok_or_else(malformed)?;
                Operator::Detector(DetectorOp { vobj, reg })
            }
            OpKind::ObjectTracker { binding } => {
                let scene = plan
                    .ops
                    .iter()
                    .any(|o| matches!(&o.kind, OpKind::ObjectDetector { binding: b, detector } if b == binding && detector == SCENE_DETECTOR));
                Operator::Tracker(TrackerOp { tracker: Tracker::new(*tracker), scene })
            }
            OpKind::VObjProjector { binding, property, history: true } => {
                Operator::History(HistoryOp { binding: binding.clone(), property: property.clone(), tracks: BTreeMap::new() })
            }
            OpKind::VObjProjector { .. } | OpKind::VObjFilter { .. } => {
                let (binding, steps) = branch_steps(std::slice::from_ref(&op.kind)).ok_or_else(malformed)?;
                Operator::Branch(BranchChain { binding, steps })
            }
            OpKind::Fused { ops } => {
                if let Some((binding, steps)) = branch_steps(ops) {
                    Operator::Branch(BranchChain { binding, steps })
                } else {
                    Operator::Tuples(TupleChain { steps: tuple_steps(plan, ops).ok_or_else(malformed)? })
                }
            }
            OpKind::Join { bindings, .. } => Operator::Join(bindings.clone()),
            OpKind::RelationProjector { .. } | OpKind::RelationFilter { .. } => {
                Operator::Tuples(TupleChain { steps: tuple_steps(plan, std::slice::from_ref(&op.kind)).ok_or_else(malformed)? })
            }
            OpKind::Sink { bindings, outputs, emit, .. } => Operator::Sink(SinkOp {
                query: plan.query.clone(),
                bindings: bindings.clone(),
                outputs: outputs.clone(),
                emit: *emit,
            }),
            OpKind::VideoAggregate { subject, quantifier, predicate, output, .. } => Operator::Aggregate(AggregateOp {
                query: plan.query.clone(),
                subject: subject.clone(),
                quantifier: *quantifier,
                predicate: predicate.clone(),
                output: *output,
                agg: VideoAggregator::default(),
            }),
            OpKind::DurationEval { keys, min_frames, gap, emit, .. } => Operator::Duration(DurationOp {
                query: plan.query.clone(),
                keys: keys.clone(),
                emit: *emit,
                tracker: DurationTracker::new(*min_frames, *gap),
            }),
            OpKind::TemporalEval { within, emit, .. } => {
                Operator::Temporal(TemporalOp { query: plan.query.clone(), within: *within, emit: *emit })
            }
        })
    }

    /// Processes one batch.
    pub fn process(&mut self, ctx: &mut ExecCtx, rt: &TupleRt, mut inputs: Vec<Flow>) -> Result<Flow, OpError> {
        let mut single = |name: &str| -> Result<Flow, OpError> {
            if inputs.len() != 1 {
                return Err(OpError::Input { op: name.into(), detail: format!("{} inputs", inputs.len()) });
            }
            Ok(inputs.pop().expect("one input"))
        };
        match self {
            Operator::Reader => Ok(Flow::Frames(ctx.raw.iter().map(|r| (r.frame_id, r.clone())).collect())),
            Operator::FrameFilter(op) => match single("FrameFilter")? {
                Flow::Frames(mut frames) => {
                    let keep = op.keep(ctx, &frames.keys().copied().collect())?;
                    frames.retain(|f, _| keep.contains(f));
                    Ok(Flow::Frames(frames))
                }
                Flow::Branch(mut g) => {
                    let keep = op.keep(ctx, &g.frames.keys().copied().collect())?;
                    let dead: Vec<FrameId> = g.frames.keys().filter(|f| !keep.contains(f)).copied().collect();
                    for f in dead {
                        g.remove_frame(f);
                    }
                    Ok(Flow::Branch(g))
                }
                other => Err(bad_input("FrameFilter", &other)),
            },
            Operator::Detector(op) => match single("ObjectDetector")? {
                Flow::Frames(frames) => Ok(Flow::Branch(op.run(ctx, frames))),
                other => Err(bad_input("ObjectDetector", &other)),
            },
            Operator::Tracker(op) => match single("ObjectTracker")? {
                Flow::Branch(g) => Ok(Flow::Branch(op.run(g))),
                other => Err(bad_input("ObjectTracker", &other)),
            },
            Operator::History(op) => match single("VObjProjector")? {
                Flow::Branch(g) => Ok(Flow::Branch(op.run(ctx, rt, g)?)),
                other => Err(bad_input("VObjProjector", &other)),
            },
            Operator::Branch(op) => match single("VObjFilter")? {
                Flow::Branch(g) => Ok(Flow::Branch(op.run(ctx, rt, g)?)),
                other => Err(bad_input("VObjFilter", &other)),
            },
            Operator::Join(bindings) => {
                if inputs.len() != bindings.len() {
                    return Err(OpError::Input { op: "Join".into(), detail: format!("{} inputs", inputs.len()) });
                }
                let mut branches = Vec::new();
                for (b, flow) in bindings.iter().zip(inputs) {
                    match flow {
                        Flow::Branch(g) => branches.push((b.clone(), g)),
                        other => return Err(bad_input("Join", &other)),
                    }
                }
                Ok(Flow::Tuples(TupleSet::join(branches)))
            }
            Operator::Tuples(op) => match single("RelationFilter")? {
                Flow::Tuples(t) => Ok(Flow::Tuples(op.run(ctx, rt, t)?)),
                other => Err(bad_input("RelationFilter", &other)),
            },
            Operator::Sink(op) => {
                let input = single("Sink")?;
                Ok(Flow::Tuples(op.run(ctx, rt, input)?))
            }
            Operator::Aggregate(op) => {
                let input = single("VideoAggregate")?;
                op.run(ctx, rt, input)?;
                Ok(Flow::Occurrences(BTreeSet::new()))
            }
            Operator::Duration(op) => {
                let input = single("DurationEval")?;
                Ok(Flow::Occurrences(op.run(ctx, input)?))
            }
            Operator::Temporal(_) => Ok(Flow::Occurrences(BTreeSet::new())),
        }
    }

    /// End of input. `inputs` are the inputs' occurrence frames over the
    /// whole video and `own` this operator's; returns the final occurrences.
    pub fn finish(&mut self, ctx: &mut ExecCtx, inputs: &[BTreeSet<FrameId>], own: BTreeSet<FrameId>) -> BTreeSet<FrameId> {
        match self {
            Operator::Aggregate(op) => {
                op.finish(ctx);
                own
            }
            Operator::Temporal(op) => match inputs {
                [first, then] => op.finish(ctx, first, then),
                _ => BTreeSet::new(),
            },
            _ => own,
        }
    }
}
