use std::collections::{BTreeMap, BTreeSet};

use super::plan::{BindingSpec, OpKind, PlanDag, PropSpec, RelationSpec};
use super::{PlanError, PlanOptions};
use crate::dsl::{
    Expr, OutputRef, PropRef, Quantifier, ValidatedProgram, ValidatedQuery, VideoOutput, VObjType,
};
use crate::registry::Registry;

/// Detector choice for one binding.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Choice {
    /// Lineage member whose detector is used.
    pub detected_as: String,
    /// Whether declared classifiers and frame filters run.
    pub filters: bool,
}

/// One point of the alternative space: a choice per plan binding.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Alternative {
    pub choices: BTreeMap<String, Choice>,
}

impl Alternative {
    pub fn label(&self, bindings: &BTreeMap<String, BindingPlan>) -> String {
        let mut parts = Vec::new();
        for (name, c) in &self.choices {
            let det = bindings.get(name).map(|b| b.detector_of(&c.detected_as)).unwrap_or_default();
            parts.push(format!("{name}={det}{}", if c.filters { "+filters" } else { "" }));
        }
        parts.join(", ")
    }
}

#[derive(Clone, Debug)]
struct VideoSpec {
    subject: String,
    quantifier: Quantifier,
    predicate: Expr,
    output: VideoOutput,
}

#[derive(Clone, Debug)]
struct RelationUse {
    name: String,
    relation: String,
    participants: Vec<String>,
}

/// A basic or spatial query reduced to bindings, relations and constraints.
#[derive(Clone, Debug)]
struct Unit {
    name: String,
    bindings: Vec<String>,
    relations: Vec<RelationUse>,
    conjuncts: Vec<Expr>,
    outputs: Vec<OutputRef>,
    video: Option<VideoSpec>,
}

/// Per-binding facts shared by every alternative.
#[derive(Clone, Debug)]
pub struct BindingPlan {
    pub vobj: String,
    /// `(type, detector)` for each lineage member with its own detector,
    /// most general first.
    pub detectors: Vec<(String, String)>,
    pub has_filters: bool,
    needs: BTreeSet<String>,
    force_tracker: bool,
}

impl BindingPlan {
    pub fn detector_of(&self, ty: &str) -> String {
        self.detectors.iter().find(|(t, _)| t == ty).map(|(_, d)| d.clone()).unwrap_or_default()
    }

    pub fn options(&self) -> Vec<Choice> {
        let mut out = Vec::new();
        for (ty, _) in &self.detectors {
            out.push(Choice { detected_as: ty.clone(), filters: false });
            if self.has_filters {
                out.push(Choice { detected_as: ty.clone(), filters: true });
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
enum Node {
    Unit(Unit),
    Duration { name: String, base: String, min_frames: u64, gap: u64 },
    Temporal { name: String, first: String, then: String, within: u64 },
}

/// Everything about a query's plan that does not depend on the alternative.
#[derive(Clone, Debug)]
pub struct Blueprint {
    pub query: String,
    pub fps: f64,
    /// Composition nodes, operands before their consumers.
    nodes: Vec<Node>,
    pub bindings: BTreeMap<String, BindingPlan>,
    relations: BTreeMap<String, (String, Vec<String>)>,
    relation_needs: BTreeMap<String, BTreeSet<String>>,
}

fn prefixed(prefix: &str, name: &str) -> String {
    format!("{prefix}{name}")
}

fn rename_expr(e: &Expr, map: &BTreeMap<String, String>) -> Expr {
    e.map_refs(&|r: &PropRef| match &r.binding {
        Some(b) => PropRef::qualified(map.get(b).map_or(b.as_str(), String::as_str), &r.name),
        None => r.clone(),
    })
}

impl Blueprint {
    pub fn new(vp: &ValidatedProgram, query: &str, fps: f64) -> Result<Blueprint, PlanError> {
        if vp.query(query).is_none() {
            return Err(PlanError::Invalid(format!("unknown query `{query}`")));
        }
        let mut bp = Blueprint {
            query: query.to_string(),
            fps,
            nodes: Vec::new(),
            bindings: BTreeMap::new(),
            relations: BTreeMap::new(),
            relation_needs: BTreeMap::new(),
        };
        let mut done = BTreeSet::new();
        bp.collect(vp, query, &mut done)?;
        bp.resolve_needs(vp)?;
        Ok(bp)
    }

    fn prefix(&self, name: &str) -> String {
        if name == self.query {
            String::new()
        } else {
            format!("{name}/")
        }
    }

    fn collect(&mut self, vp: &ValidatedProgram, name: &str, done: &mut BTreeSet<String>) -> Result<(), PlanError> {
        if done.contains(name) {
            return Ok(());
        }
        let query = vp.query(name).ok_or_else(|| PlanError::Invalid(format!("unknown query `{name}`")))?;
        let prefix = self.prefix(name);
        let node = match query {
            ValidatedQuery::Basic(spec) => {
                let map: BTreeMap<String, String> = spec
                    .vobjs
                    .iter()
                    .map(|b| b.name.clone())
                    .chain(spec.relations.iter().map(|r| r.name.clone()))
                    .map(|b| (b.clone(), prefixed(&prefix, &b)))
                    .collect();
                for b in &spec.vobjs {
                    self.add_binding(vp, &map[&b.name], &b.vobj)?;
                }
                let relations = spec
                    .relations
                    .iter()
                    .map(|r| RelationUse {
                        name: map[&r.name].clone(),
                        relation: r.relation.clone(),
                        participants: r.participants.iter().map(|p| map[p].clone()).collect(),
                    })
                    .collect();
                let conjuncts = spec
                    .frame_constraint
                    .as_ref()
                    .map(|c| rename_expr(c, &map).conjuncts())
                    .unwrap_or_default();
                let outputs = spec
                    .frame_output
                    .iter()
                    .map(|o| OutputRef { binding: map[&o.binding].clone(), property: o.property.clone() })
                    .collect();
                let video = match (&spec.video_constraint, name == self.query) {
                    (Some(vc), true) => Some(VideoSpec {
                        subject: map[&spec.video_subject().expect("validated video subject")].clone(),
                        quantifier: vc.quantifier,
                        predicate: rename_expr(&vc.predicate, &map),
                        output: spec.video_output.unwrap_or(VideoOutput::Count),
                    }),
                    _ => None,
                };
                Node::Unit(Unit {
                    name: name.to_string(),
                    bindings: spec.vobjs.iter().map(|b| map[&b.name].clone()).collect(),
                    relations,
                    conjuncts,
                    outputs,
                    video,
                })
            }
            ValidatedQuery::Spatial(spec) => {
                let left = prefixed(&prefix, "left");
                let right = prefixed(&prefix, "right");
                let rel = prefixed(&prefix, &spec.relation.name);
                let mut conjuncts = Vec::new();
                for (operand, inner, outer, ty) in [
                    (&spec.left, &spec.left_binding, &left, &spec.left_type),
                    (&spec.right, &spec.right_binding, &right, &spec.right_type),
                ] {
                    if let Some(ValidatedQuery::Basic(b)) = vp.query(operand) {
                        if !b.relations.is_empty() {
                            return Err(PlanError::Unsupported(format!(
                                "spatial operand `{operand}` binds relations"
                            )));
                        }
                    }
                    self.add_binding(vp, outer, ty)?;
                    let map = BTreeMap::from([(inner.clone(), outer.clone())]);
                    if let Some(c) = vp.effective_constraint(operand) {
                        conjuncts.extend(rename_expr(&c, &map).conjuncts());
                    }
                }
                let map: BTreeMap<String, String> = [("left", &left), ("right", &right), (spec.relation.name.as_str(), &rel)]
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v.clone()))
                    .collect();
                if let Some(c) = &spec.frame_constraint {
                    conjuncts.extend(rename_expr(c, &map).conjuncts());
                }
                let outputs = spec
                    .frame_output
                    .iter()
                    .map(|o| OutputRef {
                        binding: map.get(&o.binding).cloned().unwrap_or_else(|| o.binding.clone()),
                        property: o.property.clone(),
                    })
                    .collect();
                Node::Unit(Unit {
                    name: name.to_string(),
                    bindings: vec![left.clone(), right.clone()],
                    relations: vec![RelationUse {
                        name: rel,
                        relation: spec.relation.relation.clone(),
                        participants: vec![left, right],
                    }],
                    conjuncts,
                    outputs,
                    video: None,
                })
            }
            ValidatedQuery::Duration(d) => {
                self.collect(vp, &d.base, done)?;
                let base_unit = self.unit(&d.base).ok_or_else(|| {
                    PlanError::Unsupported(format!("duration base `{}` must be a basic or spatial query", d.base))
                })?;
                for b in base_unit.bindings.clone() {
                    self.bindings.get_mut(&b).expect("unit binding").force_tracker = true;
                }
                Node::Duration {
                    name: name.to_string(),
                    base: d.base.clone(),
                    min_frames: d.min.to_frames(self.fps).max(1),
                    gap: d.gap,
                }
            }
            ValidatedQuery::Temporal(t) => {
                self.collect(vp, &t.first, done)?;
                self.collect(vp, &t.then, done)?;
                Node::Temporal {
                    name: name.to_string(),
                    first: t.first.clone(),
                    then: t.then.clone(),
                    within: t.within.to_frames(self.fps),
                }
            }
        };
        if let Node::Unit(u) = &node {
            for r in &u.relations {
                self.relations.insert(r.name.clone(), (r.relation.clone(), r.participants.clone()));
            }
            if let Some(v) = &u.video {
                self.bindings.get_mut(&v.subject).expect("subject binding").force_tracker = true;
            }
        }
        self.nodes.push(node);
        done.insert(name.to_string());
        Ok(())
    }

    fn add_binding(&mut self, vp: &ValidatedProgram, name: &str, vobj: &str) -> Result<(), PlanError> {
        let ty = vp.vobj(vobj).ok_or_else(|| PlanError::Invalid(format!("unknown VObj type `{vobj}`")))?;
        let mut detectors = Vec::new();
        for member in ty.lineage.iter().rev() {
            if let Some(d) = vp.vobj(member).and_then(|t| t.own_detector.clone()) {
                detectors.push((member.clone(), d));
            }
        }
        if detectors.is_empty() {
            return Err(PlanError::Invalid(format!("no detector for VObj type `{vobj}`")));
        }
        let has_filters = ty
            .lineage
            .iter()
            .filter_map(|m| vp.vobj(m))
            .any(|t| !t.classifiers.is_empty() || !t.frame_filters.is_empty());
        self.bindings.insert(
            name.to_string(),
            BindingPlan { vobj: vobj.to_string(), detectors, has_filters, needs: BTreeSet::new(), force_tracker: false },
        );
        Ok(())
    }

    fn unit(&self, name: &str) -> Option<&Unit> {
        self.nodes.iter().find_map(|n| match n {
            Node::Unit(u) if u.name == name => Some(u),
            _ => None,
        })
    }

    fn resolve_needs(&mut self, vp: &ValidatedProgram) -> Result<(), PlanError> {
        let mut binding_refs: Vec<(String, String)> = Vec::new();
        let mut relation_refs: Vec<(String, String)> = Vec::new();
        for node in &self.nodes {
            let Node::Unit(u) = node else { continue };
            let mut refs: Vec<PropRef> = u.conjuncts.iter().flat_map(|c| c.refs().into_iter().cloned()).collect();
            refs.extend(u.outputs.iter().filter_map(|o| o.property.as_ref().map(|p| PropRef::qualified(&o.binding, p))));
            if let Some(v) = &u.video {
                refs.extend(v.predicate.refs().into_iter().cloned());
            }
            for r in refs {
                let Some(b) = r.binding.clone() else { continue };
                if self.bindings.contains_key(&b) {
                    binding_refs.push((b, r.name));
                } else if self.relations.contains_key(&b) {
                    relation_refs.push((b, r.name));
                } else {
                    return Err(PlanError::Invalid(format!("reference to unknown binding `{b}`")));
                }
            }
        }
        for (rel, prop) in relation_refs {
            self.relation_needs.entry(rel).or_default().insert(prop);
        }
        for (rel, props) in &self.relation_needs {
            let (relation, participants) = &self.relations[rel];
            let rt = vp.relation(relation).expect("validated relation");
            let names: Vec<String> = props.iter().cloned().collect();
            for p in rt.closure(&names) {
                for d in &rt.properties[&p].deps {
                    if let Some(alias) = &d.binding {
                        let idx = rt.alias_index(alias).expect("validated alias");
                        binding_refs.push((participants[idx].clone(), d.name.clone()));
                    }
                }
            }
        }
        for (b, p) in binding_refs {
            if !VObjType::is_builtin(&p) {
                self.bindings.get_mut(&b).expect("known binding").needs.insert(p);
            }
        }
        Ok(())
    }

    /// Alternative with the most general detector everywhere and no
    /// approximate filters.
    pub fn general(&self) -> Alternative {
        Alternative {
            choices: self
                .bindings
                .iter()
                .map(|(n, b)| (n.clone(), Choice { detected_as: b.detectors[0].0.clone(), filters: false }))
                .collect(),
        }
    }

    /// Cross product of per-binding choices, general-first, capped.
    pub fn alternatives(&self, cap: usize) -> Vec<Alternative> {
        let mut out = vec![Alternative::default()];
        for (name, b) in &self.bindings {
            let mut next = Vec::new();
            for alt in &out {
                for c in b.options() {
                    let mut a = alt.clone();
                    a.choices.insert(name.clone(), c);
                    next.push(a);
                    if next.len() >= cap.max(1) {
                        break;
                    }
                }
                if next.len() >= cap.max(1) {
                    break;
                }
            }
            out = next;
        }
        out
    }

    /// Builds the unoptimized DAG for one alternative.
    pub fn assemble(
        &self,
        vp: &ValidatedProgram,
        registry: &Registry,
        alt: &Alternative,
        options: &PlanOptions,
    ) -> Result<PlanDag, PlanError> {
        let mut plan = PlanDag::new(&self.query, &alt.label(&self.bindings), self.fps);
        let reader = plan.push(OpKind::VideoReader, vec![], 0.0);
        let mut terminals: BTreeMap<String, usize> = BTreeMap::new();

        let mut branch_filters: BTreeMap<String, Vec<Expr>> = BTreeMap::new();
        for node in &self.nodes {
            if let Node::Unit(u) = node {
                for c in &u.conjuncts {
                    let mut bs = c.bindings();
                    if bs.is_empty() {
                        bs = u.bindings[..1].to_vec();
                    }
                    if bs.len() == 1 && self.bindings.contains_key(&bs[0]) {
                        branch_filters.entry(bs[0].clone()).or_default().push(c.clone());
                    }
                }
            }
        }

        let mut branch_end: BTreeMap<String, usize> = BTreeMap::new();
        for (name, bp) in &self.bindings {
            let choice = alt
                .choices
                .get(name)
                .cloned()
                .unwrap_or_else(|| Choice { detected_as: bp.detectors[0].0.clone(), filters: false });
            let ty = vp.vobj(&bp.vobj).expect("validated type");
            let spec = binding_spec(vp, ty, &choice.detected_as, &bp.needs)?;
            let stateful: Vec<String> =
                spec.order.iter().filter(|p| spec.properties[*p].is_stateful()).cloned().collect();
            let intrinsic = spec.properties.values().any(|p| p.intrinsic);
            let stateful_relation = self.relation_needs.iter().any(|(rel, props)| {
                let (relation, participants) = &self.relations[rel];
                participants.contains(name)
                    && vp.relation(relation).is_some_and(|rt| {
                        rt.closure(&props.iter().cloned().collect::<Vec<_>>())
                            .iter()
                            .any(|p| rt.properties[p].window().is_some())
                    })
            });
            let tracked = !stateful.is_empty() || bp.force_tracker || stateful_relation || (options.memo && intrinsic);

            let detector = bp.detector_of(&choice.detected_as);
            let reg = registry
                .detector(&detector)
                .ok_or_else(|| PlanError::Link(format!("unregistered detector `{detector}`")))?;
            let mut cur = plan.push(OpKind::ObjectDetector { binding: name.clone(), detector }, vec![reader], reg.cost);
            if tracked {
                cur = plan.push(OpKind::ObjectTracker { binding: name.clone() }, vec![cur], 0.0);
            }
            let history: BTreeSet<String> = spec.closure(&stateful).into_iter().collect();
            let fn_cost = |p: &str| {
                registry.property_fn(&spec.properties[p].func.name).map_or(0.0, |f| f.cost)
            };
            for p in spec.order.iter().filter(|p| history.contains(*p)) {
                cur = plan.push(
                    OpKind::VObjProjector { binding: name.clone(), property: p.clone(), history: true },
                    vec![cur],
                    fn_cost(p),
                );
            }
            for p in spec.order.iter().filter(|p| !history.contains(*p)) {
                cur = plan.push(
                    OpKind::VObjProjector { binding: name.clone(), property: p.clone(), history: false },
                    vec![cur],
                    fn_cost(p),
                );
            }
            for c in type_constraints(vp, ty, &choice.detected_as, name)
                .into_iter()
                .chain(branch_filters.get(name).cloned().unwrap_or_default())
            {
                cur = plan.push(OpKind::VObjFilter { binding: name.clone(), conjuncts: vec![c] }, vec![cur], 0.0);
            }
            if choice.filters {
                for member in ty.lineage.iter().filter_map(|m| vp.vobj(m)) {
                    for c in &member.classifiers {
                        let cost = registry.classifier(c).map_or(0.0, |r| r.cost);
                        cur = plan.push(
                            OpKind::FrameFilter { binding: name.clone(), filter: c.clone(), classifier: true },
                            vec![cur],
                            cost,
                        );
                    }
                    for f in &member.frame_filters {
                        let cost = registry.frame_filter(f).map_or(0.0, |r| r.cost);
                        cur = plan.push(
                            OpKind::FrameFilter { binding: name.clone(), filter: f.clone(), classifier: false },
                            vec![cur],
                            cost,
                        );
                    }
                }
            }
            plan.bindings.insert(name.clone(), spec);
            branch_end.insert(name.clone(), cur);
        }

        for (rel, (relation, participants)) in &self.relations {
            let rt = vp.relation(relation).expect("validated relation");
            let needed: Vec<String> = self.relation_needs.get(rel).map(|s| s.iter().cloned().collect()).unwrap_or_default();
            let order = rt.closure(&needed);
            plan.relations.insert(
                rel.clone(),
                RelationSpec {
                    relation: relation.clone(),
                    participants: participants.clone(),
                    aliases: rt.participants.iter().map(|(a, _)| a.clone()).collect(),
                    properties: order.iter().map(|p| (p.clone(), PropSpec::from(&rt.properties[p]))).collect(),
                    order,
                },
            );
        }

        for node in &self.nodes {
            match node {
                Node::Unit(u) => {
                    let mut cur = if u.bindings.len() == 1 && u.relations.is_empty() {
                        branch_end[&u.bindings[0]]
                    } else {
                        let inputs = u.bindings.iter().map(|b| branch_end[b]).collect();
                        plan.push(OpKind::Join { unit: u.name.clone(), bindings: u.bindings.clone() }, inputs, 0.0)
                    };
                    for r in &u.relations {
                        let spec = plan.relations[&r.name].clone();
                        for p in spec.order.clone() {
                            let cost = registry.property_fn(&spec.properties[&p].func.name).map_or(0.0, |f| f.cost);
                            cur = plan.push(
                                OpKind::RelationProjector { unit: u.name.clone(), relation: r.name.clone(), property: p },
                                vec![cur],
                                cost,
                            );
                        }
                    }
                    for c in &u.conjuncts {
                        let bs = c.bindings();
                        if bs.len() <= 1 && bs.iter().all(|b| self.bindings.contains_key(b)) {
                            continue;
                        }
                        cur = plan.push(
                            OpKind::RelationFilter { unit: u.name.clone(), conjuncts: vec![c.clone()] },
                            vec![cur],
                            0.0,
                        );
                    }
                    let root = u.name == self.query;
                    let sink = plan.push(
                        OpKind::Sink {
                            unit: u.name.clone(),
                            bindings: u.bindings.clone(),
                            outputs: u.outputs.clone(),
                            emit: root,
                        },
                        vec![cur],
                        0.0,
                    );
                    terminals.insert(u.name.clone(), sink);
                    if let Some(v) = &u.video {
                        plan.push(
                            OpKind::VideoAggregate {
                                unit: u.name.clone(),
                                subject: v.subject.clone(),
                                quantifier: v.quantifier,
                                predicate: v.predicate.clone(),
                                output: v.output,
                            },
                            vec![sink],
                            0.0,
                        );
                    }
                }
                Node::Duration { name, base, min_frames, gap } => {
                    let keys = self.unit(base).map(|u| u.bindings.clone()).unwrap_or_default();
                    let id = plan.push(
                        OpKind::DurationEval {
                            unit: name.clone(),
                            base: base.clone(),
                            keys,
                            min_frames: *min_frames,
                            gap: *gap,
                            emit: *name == self.query,
                        },
                        vec![terminals[base]],
                        0.0,
                    );
                    terminals.insert(name.clone(), id);
                }
                Node::Temporal { name, first, then, within } => {
                    let id = plan.push(
                        OpKind::TemporalEval {
                            unit: name.clone(),
                            first: first.clone(),
                            then: then.clone(),
                            within: *within,
                            emit: *name == self.query,
                        },
                        vec![terminals[first], terminals[then]],
                        0.0,
                    );
                    terminals.insert(name.clone(), id);
                }
            }
        }
        plan.check()?;
        plan.seal();
        Ok(plan)
    }
}

fn binding_spec(
    vp: &ValidatedProgram,
    ty: &VObjType,
    detected_as: &str,
    needs: &BTreeSet<String>,
) -> Result<BindingSpec, PlanError> {
    let mut names: Vec<String> = needs.iter().cloned().collect();
    for c in constraint_exprs(vp, ty, detected_as) {
        names.extend(c.refs().into_iter().map(|r| r.name.clone()).filter(|n| !VObjType::is_builtin(n)));
    }
    for n in &names {
        if !ty.has_property(n) {
            return Err(PlanError::Invalid(format!("type `{}` has no property `{n}`", ty.name)));
        }
    }
    let order = ty.closure(&names);
    Ok(BindingSpec {
        vobj: ty.name.clone(),
        detected_as: detected_as.to_string(),
        properties: order.iter().map(|p| (p.clone(), PropSpec::from(&ty.properties[p]))).collect(),
        order,
    })
}

/// Own constraints of lineage members below the detecting type.
fn constraint_exprs(vp: &ValidatedProgram, ty: &VObjType, detected_as: &str) -> Vec<Expr> {
    let mut out = Vec::new();
    for member in &ty.lineage {
        if member == detected_as {
            break;
        }
        if let Some(c) = vp.vobj(member).and_then(|t| t.constraint.clone()) {
            out.push(c);
        }
    }
    out.reverse();
    out
}

fn type_constraints(vp: &ValidatedProgram, ty: &VObjType, detected_as: &str, binding: &str) -> Vec<Expr> {
    constraint_exprs(vp, ty, detected_as)
        .iter()
        .flat_map(|c| {
            c.map_refs(&|r: &PropRef| PropRef::qualified(binding, &r.name)).conjuncts()
        })
        .collect()
}
