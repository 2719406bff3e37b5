//! On-demand property computation and three-valued predicate evaluation.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::datamodel::{Edge, FrameGraph, NodeId, Value, VObjInstance};
use crate::dsl::{CmpOp, Expr, PropRef};
use crate::executor::ExecCtx;
use crate::planner::{BindingSpec, PropSpec, RelationSpec};
use crate::registry::{Deps, FnInput};

/// Kleene truth value; `Unknown` arises from Undefined inputs and counts
/// as false at the top level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Truth {
    True,
    False,
    Unknown,
}

impl Truth {
    pub fn holds(self) -> bool {
        self == Truth::True
    }

    fn not(self) -> Truth {
        match self {
            Truth::True => Truth::False,
            Truth::False => Truth::True,
            Truth::Unknown => Truth::Unknown,
        }
    }
}

impl From<bool> for Truth {
    fn from(b: bool) -> Self {
        if b {
            Truth::True
        } else {
            Truth::False
        }
    }
}

/// Evaluates a predicate. With `lazy`, `&` stops at the first false operand
/// and `|` at the first true one, so later operands' properties are never
/// requested.
pub fn eval_expr(expr: &Expr, lazy: bool, resolve: &mut dyn FnMut(&PropRef) -> Value) -> Truth {
    match expr {
        Expr::And(items) => {
            let mut acc = Truth::True;
            for item in items {
                match eval_expr(item, lazy, resolve) {
                    Truth::False => {
                        acc = Truth::False;
                        if lazy {
                            return acc;
                        }
                    }
                    Truth::Unknown if acc == Truth::True => acc = Truth::Unknown,
                    _ => {}
                }
            }
            acc
        }
        Expr::Or(items) => {
            let mut acc = Truth::False;
            for item in items {
                match eval_expr(item, lazy, resolve) {
                    Truth::True => {
                        acc = Truth::True;
                        if lazy {
                            return acc;
                        }
                    }
                    Truth::Unknown if acc == Truth::False => acc = Truth::Unknown,
                    _ => {}
                }
            }
            acc
        }
        Expr::Not(inner) => eval_expr(inner, lazy, resolve).not(),
        Expr::Compare { lhs, op, rhs } => compare(&resolve(lhs), *op, rhs),
        Expr::In { lhs, set } => {
            let v = resolve(lhs);
            if v.is_undefined() {
                Truth::Unknown
            } else {
                Truth::from(set.iter().any(|s| values_equal(&v, s)))
            }
        }
    }
}

fn values_equal(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Num(x), Value::Num(y)) => x == y,
        (Value::List(x), Value::List(y)) => x.len() == y.len() && x.iter().zip(y).all(|(a, b)| values_equal(a, b)),
        _ => a == b,
    }
}

pub fn compare(lhs: &Value, op: CmpOp, rhs: &Value) -> Truth {
    if lhs.is_undefined() || rhs.is_undefined() {
        return Truth::Unknown;
    }
    match op {
        CmpOp::Eq => Truth::from(values_equal(lhs, rhs)),
        CmpOp::Ne => Truth::from(!values_equal(lhs, rhs)),
        _ => {
            let ord = match (lhs, rhs) {
                (Value::Num(a), Value::Num(b)) => a.partial_cmp(b),
                (Value::Str(a), Value::Str(b)) => Some(a.cmp(b)),
                _ => None,
            };
            let Some(ord) = ord else { return Truth::Unknown };
            Truth::from(match op {
                CmpOp::Lt => ord.is_lt(),
                CmpOp::Le => ord.is_le(),
                CmpOp::Gt => ord.is_gt(),
                CmpOp::Ge => ord.is_ge(),
                CmpOp::Eq | CmpOp::Ne => unreachable!(),
            })
        }
    }
}

/// Key under which a stateful property's i-th dependency window is stored.
pub fn window_key(property: &str, dep: usize) -> String {
    format!("{property}#{dep}")
}

fn digest(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

/// Evaluation context for one VObj binding.
#[derive(Clone, Debug)]
pub struct BindingRt {
    pub name: String,
    pub spec: BindingSpec,
    /// Memo namespace: identifies the tracker that assigned the ids.
    pub scope: String,
    memo_keys: BTreeMap<String, String>,
}

impl BindingRt {
    pub fn new(name: &str, spec: BindingSpec, scope: String) -> Self {
        let memo_keys = spec
            .order
            .iter()
            .map(|p| {
                let closure: Vec<(&String, &PropSpec)> =
                    spec.closure(std::slice::from_ref(p)).iter().map(|n| spec.properties.get_key_value(n).unwrap()).collect();
                let text = serde_json::to_string(&closure).expect("spec serializes");
                (p.clone(), format!("{p}:{}", digest(&text)))
            })
            .collect();
        BindingRt { name: name.to_string(), spec, scope, memo_keys }
    }

    /// Memo label key for a conjunct over intrinsic properties only, or
    /// `None` when the conjunct reads anything else.
    pub fn label_key(&self, conjunct: &Expr) -> Option<String> {
        let refs = conjunct.refs();
        if refs.is_empty() {
            return None;
        }
        let mut keys = Vec::new();
        for r in &refs {
            let p = self.spec.properties.get(&r.name)?;
            if !p.intrinsic {
                return None;
            }
            keys.push(self.memo_keys[&r.name].clone());
        }
        let neutral = conjunct.map_refs(&|r: &PropRef| PropRef::qualified("_", &r.name));
        Some(format!("{}|{}", crate::dsl::print_expr(&neutral), keys.join(",")))
    }
}

/// Value of property `name` on `node`, computing it (and its dependencies)
/// on first use. Intrinsic values go through the memo store when enabled.
pub fn node_property(
    ctx: &mut ExecCtx,
    rt: &BindingRt,
    node: &mut VObjInstance,
    channels: &BTreeMap<String, f64>,
    name: &str,
) -> Value {
    match name {
        "bbox" => return node.bbox.to_value(),
        "score" => return Value::Num(node.score),
        "class" => return Value::Str(node.detected_class.clone()),
        "frame_rate" => return Value::Num(ctx.meta.fps),
        _ => {}
    }
    if let Some(v) = node.properties.get(name) {
        return v.clone();
    }
    let Some(spec) = rt.spec.properties.get(name) else {
        return Value::Undefined;
    };
    let memo_track = node.track_id.filter(|_| spec.intrinsic && ctx.options.memo);
    if let Some(track) = memo_track {
        if let Some(v) = ctx.memo.value(&rt.scope, track, &rt.memo_keys[name]) {
            let v = v.clone();
            ctx.stats.memo_hits += 1;
            node.properties.insert(name.to_string(), v.clone());
            return v;
        }
    }
    let value = if spec.is_stateful() {
        let mut windows = Vec::with_capacity(spec.deps.len());
        for i in 0..spec.deps.len() {
            match node.windows.get(&window_key(name, i)) {
                Some(w) if w.iter().all(|v| !v.is_undefined()) => windows.push(w.clone()),
                _ => {
                    windows.clear();
                    break;
                }
            }
        }
        if windows.len() == spec.deps.len() && !windows.is_empty() {
            invoke(ctx, spec, name, &node.attrs, channels, Deps::Window(&windows))
        } else {
            Value::Undefined
        }
    } else {
        let mut vals = Vec::with_capacity(spec.deps.len());
        for d in &spec.deps {
            vals.push(node_property(ctx, rt, node, channels, &d.name));
        }
        if vals.iter().any(Value::is_undefined) {
            Value::Undefined
        } else {
            invoke(ctx, spec, name, &node.attrs, channels, Deps::Current(&vals))
        }
    };
    if let (Some(track), false) = (memo_track, value.is_undefined()) {
        ctx.memo.insert_value(&rt.scope, track, &rt.memo_keys[name], value.clone());
    }
    node.properties.insert(name.to_string(), value.clone());
    value
}

fn invoke(
    ctx: &mut ExecCtx,
    spec: &PropSpec,
    name: &str,
    attrs: &BTreeMap<String, Value>,
    channels: &BTreeMap<String, f64>,
    deps: Deps,
) -> Value {
    let Some(reg) = ctx.registry.property_fn(&spec.func.name) else {
        return Value::Undefined;
    };
    let input = FnInput {
        attrs,
        channels,
        fps: ctx.meta.fps,
        px_per_m: ctx.meta.calibration,
        args: reg.effective_args(&spec.func.args),
        deps,
    };
    let value = reg.implementation.call(&input);
    *ctx.stats.function_invocations.entry(spec.func.name.clone()).or_default() += 1;
    *ctx.stats.property_invocations.entry(name.to_string()).or_default() += 1;
    let cost = reg.cost;
    ctx.charge(cost);
    value
}

/// Computes every property the binding uses.
pub fn materialize(ctx: &mut ExecCtx, rt: &BindingRt, node: &mut VObjInstance, channels: &BTreeMap<String, f64>) {
    for p in &rt.spec.order {
        node_property(ctx, rt, node, channels, p);
    }
}

/// Evaluation context for one relation binding.
#[derive(Clone, Debug)]
pub struct RelationRt {
    pub name: String,
    pub spec: RelationSpec,
}

/// Mutable view of the nodes and edges a tuple-level evaluation may touch.
pub struct TupleView<'a> {
    pub branches: &'a mut BTreeMap<String, FrameGraph>,
    pub edges: &'a mut BTreeMap<(String, Vec<NodeId>), Edge>,
    pub bindings: &'a BTreeMap<String, BindingRt>,
    pub relations: &'a BTreeMap<String, RelationRt>,
    pub channels: &'a BTreeMap<String, f64>,
}

impl TupleView<'_> {
    /// Property of a VObj binding's node.
    pub fn node_value(&mut self, ctx: &mut ExecCtx, binding: &str, id: NodeId, name: &str) -> Value {
        let (Some(rt), Some(graph)) = (self.bindings.get(binding), self.branches.get_mut(binding)) else {
            return Value::Undefined;
        };
        match graph.nodes.get_mut(&id) {
            Some(node) => node_property(ctx, rt, node, self.channels, name),
            None => Value::Undefined,
        }
    }

    pub fn ensure_edge(&mut self, relation: &str, participants: &[NodeId]) {
        let key = (relation.to_string(), participants.to_vec());
        self.edges.entry(key).or_insert_with(|| Edge::relation(relation, participants.to_vec()));
    }

    /// Property of a relation edge over `participants`.
    pub fn edge_value(&mut self, ctx: &mut ExecCtx, relation: &str, participants: &[NodeId], name: &str) -> Value {
        self.ensure_edge(relation, participants);
        let key = (relation.to_string(), participants.to_vec());
        if let Some(v) = self.edges[&key].properties.get(name) {
            return v.clone();
        }
        let Some(rt) = self.relations.get(relation) else { return Value::Undefined };
        let Some(spec) = rt.spec.properties.get(name).cloned() else { return Value::Undefined };
        let value = if spec.is_stateful() {
            let edge = &self.edges[&key];
            let windows: Option<Vec<Vec<Value>>> = (0..spec.deps.len())
                .map(|i| edge.windows.get(&window_key(name, i)).filter(|w| w.iter().all(|v| !v.is_undefined())).cloned())
                .collect();
            match windows {
                Some(w) if !w.is_empty() => {
                    invoke(ctx, &spec, name, &BTreeMap::new(), self.channels, Deps::Window(&w))
                }
                _ => Value::Undefined,
            }
        } else {
            let mut vals = Vec::with_capacity(spec.deps.len());
            for d in &spec.deps {
                vals.push(self.dep_value(ctx, &rt.spec.clone(), relation, participants, d));
            }
            if vals.iter().any(Value::is_undefined) {
                Value::Undefined
            } else {
                invoke(ctx, &spec, name, &BTreeMap::new(), self.channels, Deps::Current(&vals))
            }
        };
        self.edges.get_mut(&key).expect("edge").properties.insert(name.to_string(), value.clone());
        value
    }

    /// Current value of one relation dependency: a participant property or
    /// one of the relation's own.
    pub fn dep_value(
        &mut self,
        ctx: &mut ExecCtx,
        spec: &RelationSpec,
        relation: &str,
        participants: &[NodeId],
        dep: &PropRef,
    ) -> Value {
        match &dep.binding {
            Some(alias) => {
                let Some(i) = spec.aliases.iter().position(|a| a == alias) else { return Value::Undefined };
                let binding = spec.participants[i].clone();
                self.node_value(ctx, &binding, participants[i], &dep.name)
            }
            None => self.edge_value(ctx, relation, participants, &dep.name),
        }
    }

    /// Participants of `relation` within a tuple laid out as `bindings`.
    pub fn participants(&self, relation: &str, bindings: &[String], tuple: &[NodeId]) -> Option<Vec<NodeId>> {
        let rt = self.relations.get(relation)?;
        rt.spec
            .participants
            .iter()
            .map(|b| bindings.iter().position(|x| x == b).map(|i| tuple[i]))
            .collect()
    }

    /// Resolves a qualified reference for one tuple.
    pub fn resolve(&mut self, ctx: &mut ExecCtx, bindings: &[String], tuple: &[NodeId], r: &PropRef) -> Value {
        let Some(b) = &r.binding else { return Value::Undefined };
        if let Some(i) = bindings.iter().position(|x| x == b) {
            return self.node_value(ctx, b, tuple[i], &r.name);
        }
        match self.participants(b, bindings, tuple) {
            Some(parts) => self.edge_value(ctx, b, &parts, &r.name),
            None => Value::Undefined,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::parse_expr;

    fn eval(src: &str, lazy: bool, values: &[(&str, Value)]) -> (Truth, Vec<String>) {
        let e = parse_expr(src).unwrap();
        let mut seen = Vec::new();
        let t = eval_expr(&e, lazy, &mut |r| {
            seen.push(r.to_string());
            values.iter().find(|(n, _)| *n == r.to_string()).map(|(_, v)| v.clone()).unwrap_or_default()
        });
        (t, seen)
    }

    #[test]
    fn and_short_circuits_only_when_lazy() {
        let vals = [("c.color", Value::from("blue")), ("c.direction", Value::from("right"))];
        let (t, seen) = eval(r#"c.color == "red" & c.direction == "right""#, true, &vals);
        assert_eq!(t, Truth::False);
        assert_eq!(seen, vec!["c.color"]);
        let (t, seen) = eval(r#"c.color == "red" & c.direction == "right""#, false, &vals);
        assert_eq!(t, Truth::False);
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn or_short_circuits_on_true() {
        let vals = [("c.a", Value::Num(1.0))];
        let (t, seen) = eval("c.a == 1 | c.b == 2", true, &vals);
        assert_eq!(t, Truth::True);
        assert_eq!(seen, vec!["c.a"]);
    }

    #[test]
    fn undefined_is_unknown_and_negation_keeps_it() {
        let (t, _) = eval("c.speed > 3", true, &[]);
        assert_eq!(t, Truth::Unknown);
        let (t, _) = eval("!(c.speed > 3)", true, &[]);
        assert_eq!(t, Truth::Unknown);
        assert!(!t.holds());
        let (t, _) = eval("c.speed > 3 | c.x == 1", true, &[("c.x", Value::Num(1.0))]);
        assert_eq!(t, Truth::True);
        let (t, _) = eval("c.speed > 3 & c.x == 2", true, &[("c.x", Value::Num(1.0))]);
        assert_eq!(t, Truth::False);
    }

    #[test]
    fn membership_and_mixed_types() {
        let vals = [("c.color", Value::from("red"))];
        assert_eq!(eval(r#"c.color in ["red", "blue"]"#, true, &vals).0, Truth::True);
        assert_eq!(eval(r#"c.color in ["green"]"#, true, &vals).0, Truth::False);
        assert_eq!(eval("c.color == 3", true, &vals).0, Truth::False);
        assert_eq!(eval("c.color > 3", true, &vals).0, Truth::Unknown);
    }
}
