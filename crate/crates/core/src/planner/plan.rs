use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PlanError;
use crate::dsl::{print_expr, Expr, FnCall, OutputRef, PropRef, PropertyDef, PropertyKind, Quantifier, VideoOutput};
use crate::registry::Registry;

pub const PLAN_VERSION: u32 = 1;

/// Serializable property definition carried inside a plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropSpec {
    pub kind: PropertyKind,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub intrinsic: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub deps: Vec<PropRef>,
    pub func: FnCall,
}

impl From<&PropertyDef> for PropSpec {
    fn from(d: &PropertyDef) -> Self {
        PropSpec { kind: d.kind, intrinsic: d.intrinsic, deps: d.deps.clone(), func: d.func.clone() }
    }
}

impl PropSpec {
    pub fn window(&self) -> Option<usize> {
        match self.kind {
            PropertyKind::Stateless => None,
            PropertyKind::Stateful { window } => Some(window),
        }
    }

    pub fn is_stateful(&self) -> bool {
        self.window().is_some()
    }
}

/// One VObj binding as executed: its type and the properties the plan uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BindingSpec {
    pub vobj: String,
    /// Raw classes are labelled with this type's detector.
    pub detected_as: String,
    pub properties: BTreeMap<String, PropSpec>,
    /// Property names in dependency order.
    pub order: Vec<String>,
}

impl BindingSpec {
    /// Transitive closure of `names` in dependency order.
    pub fn closure(&self, names: &[String]) -> Vec<String> {
        let mut needed = std::collections::BTreeSet::new();
        let mut stack = names.to_vec();
        while let Some(n) = stack.pop() {
            if let Some(p) = self.properties.get(&n) {
                if needed.insert(n) {
                    stack.extend(p.deps.iter().map(|d| d.name.clone()));
                }
            }
        }
        self.order.iter().filter(|n| needed.contains(*n)).cloned().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationSpec {
    pub relation: String,
    /// Plan binding names, positionally matching `aliases`.
    pub participants: Vec<String>,
    pub aliases: Vec<String>,
    pub properties: BTreeMap<String, PropSpec>,
    pub order: Vec<String>,
}

impl RelationSpec {
    pub fn binding_for_alias(&self, alias: &str) -> Option<&str> {
        self.aliases.iter().position(|a| a == alias).map(|i| self.participants[i].as_str())
    }

    pub fn closure(&self, names: &[String]) -> Vec<String> {
        let mut needed = std::collections::BTreeSet::new();
        let mut stack = names.to_vec();
        while let Some(n) = stack.pop() {
            if let Some(p) = self.properties.get(&n) {
                if needed.insert(n) {
                    stack.extend(p.deps.iter().filter(|d| d.binding.is_none()).map(|d| d.name.clone()));
                }
            }
        }
        self.order.iter().filter(|n| needed.contains(*n)).cloned().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpKind {
    VideoReader,
    /// Drops whole frames; a binary classifier when `classifier` is set,
    /// otherwise a registered channel filter.
    FrameFilter { binding: String, filter: String, classifier: bool },
    ObjectDetector { binding: String, detector: String },
    ObjectTracker { binding: String },
    /// Computes one property. History projectors run for every node, and for
    /// stateful properties record dependency windows per track.
    VObjProjector { binding: String, property: String, history: bool },
    VObjFilter { binding: String, conjuncts: Vec<Expr> },
    Join { unit: String, bindings: Vec<String> },
    RelationProjector { unit: String, relation: String, property: String },
    RelationFilter { unit: String, conjuncts: Vec<Expr> },
    /// Chain of projectors and filters evaluated node by node.
    Fused { ops: Vec<OpKind> },
    Sink { unit: String, bindings: Vec<String>, outputs: Vec<OutputRef>, emit: bool },
    VideoAggregate { unit: String, subject: String, quantifier: Quantifier, predicate: Expr, output: VideoOutput },
    DurationEval { unit: String, base: String, keys: Vec<String>, min_frames: u64, gap: u64, emit: bool },
    TemporalEval { unit: String, first: String, then: String, within: u64, emit: bool },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::VideoReader => "VideoReader",
            OpKind::FrameFilter { .. } => "FrameFilter",
            OpKind::ObjectDetector { .. } => "ObjectDetector",
            OpKind::ObjectTracker { .. } => "ObjectTracker",
            OpKind::VObjProjector { .. } => "VObjProjector",
            OpKind::VObjFilter { .. } => "VObjFilter",
            OpKind::Join { .. } => "Join",
            OpKind::RelationProjector { .. } => "RelationProjector",
            OpKind::RelationFilter { .. } => "RelationFilter",
            OpKind::Fused { .. } => "Fused",
            OpKind::Sink { .. } => "Sink",
            OpKind::VideoAggregate { .. } => "VideoAggregate",
            OpKind::DurationEval { .. } => "DurationEval",
            OpKind::TemporalEval { .. } => "TemporalEval",
        }
    }

    /// The VObj binding a branch-level operator belongs to.
    pub fn binding(&self) -> Option<&str> {
        match self {
            OpKind::FrameFilter { binding, .. }
            | OpKind::ObjectDetector { binding, .. }
            | OpKind::ObjectTracker { binding }
            | OpKind::VObjProjector { binding, .. }
            | OpKind::VObjFilter { binding, .. } => Some(binding),
            OpKind::Fused { ops } => ops.first().and_then(OpKind::binding),
            _ => None,
        }
    }

    pub fn describe(&self) -> String {
        let conj = |c: &[Expr]| c.iter().map(print_expr).collect::<Vec<_>>().join(" & ");
        match self {
            OpKind::VideoReader => "VideoReader".into(),
            OpKind::FrameFilter { binding, filter, classifier } => {
                format!("{}({filter}) [{binding}]", if *classifier { "Classifier" } else { "FrameFilter" })
            }
            OpKind::ObjectDetector { binding, detector } => format!("ObjectDetector({detector}) [{binding}]"),
            OpKind::ObjectTracker { binding } => format!("ObjectTracker [{binding}]"),
            OpKind::VObjProjector { binding, property, history } => {
                format!("VObjProjector({property}{}) [{binding}]", if *history { ", history" } else { "" })
            }
            OpKind::VObjFilter { binding, conjuncts } => format!("VObjFilter({}) [{binding}]", conj(conjuncts)),
            OpKind::Join { unit, bindings } => format!("Join({}) [{unit}]", bindings.join(", ")),
            OpKind::RelationProjector { unit, relation, property } => {
                format!("RelationProjector({relation}.{property}) [{unit}]")
            }
            OpKind::RelationFilter { unit, conjuncts } => format!("RelationFilter({}) [{unit}]", conj(conjuncts)),
            OpKind::Fused { ops } => {
                format!("Fused({})", ops.iter().map(OpKind::describe).collect::<Vec<_>>().join("; "))
            }
            OpKind::Sink { unit, .. } => format!("Sink [{unit}]"),
            OpKind::VideoAggregate { unit, subject, .. } => format!("VideoAggregate({subject}) [{unit}]"),
            OpKind::DurationEval { unit, base, min_frames, gap, .. } => {
                format!("DurationEval({base}, min={min_frames}, gap={gap}) [{unit}]")
            }
            OpKind::TemporalEval { unit, first, then, within, .. } => {
                format!("TemporalEval({first} -> {then}, within={within}) [{unit}]")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpNode {
    pub id: usize,
    pub kind: OpKind,
    pub inputs: Vec<usize>,
    /// Informational device tag.
    pub placement: String,
    /// Declared cost units per invocation.
    pub cost: f64,
}

/// A concrete operator DAG. Operator ids are a topological order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanDag {
    pub version: u32,
    pub query: String,
    /// Short description of the alternative (detector choices).
    pub label: String,
    pub fps: f64,
    pub bindings: BTreeMap<String, BindingSpec>,
    pub relations: BTreeMap<String, RelationSpec>,
    pub ops: Vec<OpNode>,
    #[serde(default)]
    pub plan_id: String,
}

impl PlanDag {
    pub fn new(query: &str, label: &str, fps: f64) -> Self {
        PlanDag {
            version: PLAN_VERSION,
            query: query.to_string(),
            label: label.to_string(),
            fps,
            bindings: BTreeMap::new(),
            relations: BTreeMap::new(),
            ops: Vec::new(),
            plan_id: String::new(),
        }
    }

    pub fn push(&mut self, kind: OpKind, inputs: Vec<usize>, cost: f64) -> usize {
        let id = self.ops.len();
        let placement = if matches!(kind, OpKind::ObjectDetector { .. }) { "gpu" } else { "cpu" };
        self.ops.push(OpNode { id, kind, inputs, placement: placement.into(), cost });
        id
    }

    /// Canonical JSON without the id field.
    fn canonical(&self) -> String {
        let mut copy = self.clone();
        copy.plan_id = String::new();
        serde_json::to_string(&copy).expect("plan serializes")
    }

    pub fn compute_id(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Recomputes `plan_id` after a structural change.
    pub fn seal(&mut self) {
        self.plan_id = self.compute_id();
    }

    pub fn consumers(&self, id: usize) -> Vec<usize> {
        self.ops.iter().filter(|o| o.inputs.contains(&id)).map(|o| o.id).collect()
    }

    pub fn count(&self, name: &str) -> usize {
        self.ops.iter().map(|o| count_kind(&o.kind, name)).sum()
    }

    /// Checks acyclicity (ids ascend along edges) and that each projector's
    /// dependencies are produced upstream or lazily available.
    pub fn check(&self) -> Result<(), PlanError> {
        for op in &self.ops {
            for &i in &op.inputs {
                if i >= op.id {
                    return Err(PlanError::Invalid(format!("operator {} consumes later operator {i}", op.id)));
                }
            }
        }
        for (name, spec) in &self.bindings {
            for p in spec.properties.keys() {
                if !spec.order.contains(p) {
                    return Err(PlanError::Invalid(format!("binding `{name}` property `{p}` missing from order")));
                }
            }
        }
        Ok(())
    }

    /// Fails when the registry lacks a component the plan names.
    pub fn link(&self, registry: &Registry) -> Result<(), PlanError> {
        fn walk(kind: &OpKind, registry: &Registry) -> Result<(), PlanError> {
            match kind {
                OpKind::ObjectDetector { detector, .. } if registry.detector(detector).is_none() => {
                    Err(PlanError::Link(format!("unregistered detector `{detector}`")))
                }
                OpKind::FrameFilter { filter, classifier: true, .. } if registry.classifier(filter).is_none() => {
                    Err(PlanError::Link(format!("unregistered classifier `{filter}`")))
                }
                OpKind::FrameFilter { filter, classifier: false, .. } if registry.frame_filter(filter).is_none() => {
                    Err(PlanError::Link(format!("unregistered frame filter `{filter}`")))
                }
                OpKind::Fused { ops } => ops.iter().try_for_each(|o| walk(o, registry)),
                _ => Ok(()),
            }
        }
        for op in &self.ops {
            walk(&op.kind, registry)?;
        }
        let specs = self
            .bindings
            .values()
            .flat_map(|b| b.properties.values())
            .chain(self.relations.values().flat_map(|r| r.properties.values()));
        for p in specs {
            if registry.property_fn(&p.func.name).is_none() {
                return Err(PlanError::Link(format!("unregistered property function `{}`", p.func.name)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PlanError> {
        let text = serde_json::to_string_pretty(self).expect("plan serializes");
        std::fs::write(path.as_ref(), text + "\n")
            .map_err(|e| PlanError::Io(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PlanDag, PlanError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| PlanError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<PlanDag, PlanError> {
        #[derive(Deserialize)]
        struct Header {
            version: u32,
        }
        let header: Header = serde_json::from_str(text).map_err(|e| PlanError::Parse(e.to_string()))?;
        if header.version != PLAN_VERSION {
            return Err(PlanError::Version { found: header.version, expected: PLAN_VERSION });
        }
        let plan: PlanDag = serde_json::from_str(text).map_err(|e| PlanError::Parse(e.to_string()))?;
        if plan.plan_id != plan.compute_id() {
            return Err(PlanError::Parse("plan_id does not match plan contents".into()));
        }
        plan.check()?;
        Ok(plan)
    }

    /// Graph-description (DOT) rendering with per-operator declared costs.
    pub fn to_dot(&self, measured: Option<&BTreeMap<usize, f64>>) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "digraph \"{}\" {{", self.query);
        let _ = writeln!(out, "  label=\"{} {} plan {}\";", self.query, self.label, &self.plan_id[..self.plan_id.len().min(12)]);
        let _ = writeln!(out, "  rankdir=TB;");
        for op in &self.ops {
            let mut label = format!("#{} {}\\ncost={}", op.id, op.kind.describe().replace('"', "\\\""), op.cost);
            if let Some(m) = measured.and_then(|m| m.get(&op.id)) {
                let _ = write!(label, "\\nmeasured={m}");
            }
            let _ = writeln!(out, "  n{} [label=\"{}\", shape=box];", op.id, label);
        }
        for op in &self.ops {
            for i in &op.inputs {
                let _ = writeln!(out, "  n{i} -> n{};", op.id);
            }
        }
        out.push_str("}\n");
        out
    }
}

fn count_kind(kind: &OpKind, name: &str) -> usize {
    let own = usize::from(kind.name() == name);
    match kind {
        OpKind::Fused { ops } => own + ops.iter().map(|o| count_kind(o, name)).sum::<usize>(),
        _ => own,
    }
}
