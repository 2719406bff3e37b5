use std::collections::{BTreeMap, BTreeSet};

use super::ast::*;
use super::{Diagnostic, SCENE};
use crate::datamodel::{Value, ValueType};

/// Signature of a property function as seen by the validator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FnSignature {
    pub returns: ValueType,
    /// Number of dependencies consumed, or `None` for variadic.
    pub arity: Option<usize>,
    /// Only meaningful over a history window.
    pub needs_window: bool,
}

/// Name lookup for registered components.
pub trait Catalog {
    fn property_fn(&self, name: &str) -> Option<FnSignature>;
    fn has_detector(&self, name: &str) -> bool;
    fn has_classifier(&self, name: &str) -> bool;
    fn has_frame_filter(&self, name: &str) -> bool;
}

/// Properties every VObj carries without declaring them.
pub const BUILTIN_PROPERTIES: &[(&str, ValueType)] = &[
    ("bbox", ValueType::List),
    ("score", ValueType::Num),
    ("class", ValueType::Str),
    ("frame_rate", ValueType::Num),
];

const SCENE_DETECTOR: &str = "scene";

/// A VObj type with inheritance flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct VObjType {
    pub name: String,
    pub parent: Option<String>,
    /// The type itself first, then each ancestor up to the root.
    pub lineage: Vec<String>,
    pub own_detector: Option<String>,
    /// Detector of the nearest type in the lineage that names one.
    pub detector: String,
    pub classifiers: Vec<String>,
    pub frame_filters: Vec<String>,
    pub constraint: Option<Expr>,
    pub properties: BTreeMap<String, PropertyDef>,
    /// Declared properties in dependency order.
    pub order: Vec<String>,
    pub types: BTreeMap<String, ValueType>,
}

impl VObjType {
    pub fn is_builtin(name: &str) -> bool {
        BUILTIN_PROPERTIES.iter().any(|(n, _)| *n == name)
    }

    pub fn has_property(&self, name: &str) -> bool {
        self.types.contains_key(name)
    }

    /// Transitive declared dependencies of `names`, in dependency order,
    /// including the names themselves.
    pub fn closure(&self, names: &[String]) -> Vec<String> {
        let mut needed = BTreeSet::new();
        let mut stack: Vec<String> = names.to_vec();
        while let Some(n) = stack.pop() {
            if let Some(def) = self.properties.get(&n) {
                if needed.insert(n.clone()) {
                    stack.extend(def.deps.iter().map(|d| d.name.clone()));
                }
            }
        }
        self.order.iter().filter(|n| needed.contains(*n)).cloned().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationType {
    pub name: String,
    pub participants: Vec<(String, String)>,
    pub properties: BTreeMap<String, PropertyDef>,
    pub order: Vec<String>,
    pub types: BTreeMap<String, ValueType>,
}

impl RelationType {
    pub fn closure(&self, names: &[String]) -> Vec<String> {
        let mut needed = BTreeSet::new();
        let mut stack: Vec<String> = names.to_vec();
        while let Some(n) = stack.pop() {
            if let Some(def) = self.properties.get(&n) {
                if needed.insert(n.clone()) {
                    stack.extend(def.deps.iter().filter(|d| d.binding.is_none()).map(|d| d.name.clone()));
                }
            }
        }
        self.order.iter().filter(|n| needed.contains(*n)).cloned().collect()
    }

    pub fn alias_index(&self, alias: &str) -> Option<usize> {
        self.participants.iter().position(|(a, _)| a == alias)
    }
}

/// A basic query with inheritance applied.
#[derive(Clone, Debug, PartialEq)]
pub struct BasicSpec {
    pub name: String,
    pub lineage: Vec<String>,
    pub vobjs: Vec<VObjBinding>,
    pub relations: Vec<RelationBinding>,
    pub frame_constraint: Option<Expr>,
    pub frame_output: Vec<OutputRef>,
    pub video_constraint: Option<VideoConstraint>,
    pub video_output: Option<VideoOutput>,
}

impl BasicSpec {
    pub fn binding(&self, name: &str) -> Option<&VObjBinding> {
        self.vobjs.iter().find(|b| b.name == name)
    }

    pub fn relation_binding(&self, name: &str) -> Option<&RelationBinding> {
        self.relations.iter().find(|b| b.name == name)
    }

    /// The binding whose tracks a video constraint aggregates over.
    pub fn video_subject(&self) -> Option<String> {
        self.video_constraint.as_ref().and_then(|vc| vc.predicate.bindings().into_iter().next())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialSpec {
    pub name: String,
    pub left: String,
    pub right: String,
    /// Binding name of the single subject inside each operand query.
    pub left_binding: String,
    pub right_binding: String,
    pub left_type: String,
    pub right_type: String,
    pub relation: RelationBinding,
    pub frame_constraint: Option<Expr>,
    pub frame_output: Vec<OutputRef>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ValidatedQuery {
    Basic(BasicSpec),
    Duration(DurationQuery),
    Spatial(SpatialSpec),
    Temporal(TemporalQuery),
}

impl ValidatedQuery {
    pub fn kind(&self) -> QueryKind {
        match self {
            ValidatedQuery::Basic(_) => QueryKind::Basic,
            ValidatedQuery::Duration(_) => QueryKind::Duration,
            ValidatedQuery::Spatial(_) => QueryKind::Spatial,
            ValidatedQuery::Temporal(_) => QueryKind::Temporal,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ValidatedProgram {
    pub program: Program,
    pub vobjs: BTreeMap<String, VObjType>,
    pub relations: BTreeMap<String, RelationType>,
    pub queries: BTreeMap<String, ValidatedQuery>,
    /// Query names in declaration order.
    pub query_order: Vec<String>,
}

impl ValidatedProgram {
    pub fn vobj(&self, name: &str) -> Option<&VObjType> {
        self.vobjs.get(name)
    }

    pub fn relation(&self, name: &str) -> Option<&RelationType> {
        self.relations.get(name)
    }

    pub fn query(&self, name: &str) -> Option<&ValidatedQuery> {
        self.queries.get(name)
    }

    pub fn is_subtype(&self, ty: &str, ancestor: &str) -> bool {
        self.vobjs.get(ty).is_some_and(|t| t.lineage.iter().any(|a| a == ancestor))
    }

    /// The query's frame constraint conjoined with those of all its ancestors,
    /// root first.
    pub fn effective_constraint(&self, query: &str) -> Option<Expr> {
        let mut parts = Vec::new();
        let mut current = self.program.query(query);
        while let Some(QueryDecl::Basic(q)) = current {
            if let Some(c) = &q.frame_constraint {
                parts.push(c.clone());
            }
            current = q.parent.as_deref().and_then(|p| self.program.query(p));
        }
        if let Some(QueryDecl::Spatial(s)) = self.program.query(query) {
            parts.extend(s.frame_constraint.clone());
        }
        parts.reverse();
        if parts.is_empty() {
            None
        } else {
            Some(Expr::and(parts))
        }
    }

    /// The query to run when none is named: the last declared one that no
    /// other query composes or extends.
    pub fn default_query(&self) -> Option<&str> {
        let mut used = BTreeSet::new();
        for q in &self.program.queries {
            used.extend(q.operands().into_iter().map(str::to_string));
            if let QueryDecl::Basic(b) = q {
                used.extend(b.parent.clone());
            }
        }
        self.query_order
            .iter()
            .rev()
            .find(|q| !used.contains(*q))
            .or_else(|| self.query_order.last())
            .map(String::as_str)
    }
}

/// Checks a parsed program and flattens its inheritance.
pub fn validate(program: &Program, catalog: &dyn Catalog) -> Result<ValidatedProgram, Vec<Diagnostic>> {
    let mut v = Validator { program, catalog, diags: Vec::new() };
    let result = v.run();
    if v.diags.is_empty() {
        Ok(result.expect("validation produced no program without diagnostics"))
    } else {
        Err(v.diags)
    }
}

struct Validator<'a> {
    program: &'a Program,
    catalog: &'a dyn Catalog,
    diags: Vec<Diagnostic>,
}

/// What a binding name in a predicate scope refers to.
#[derive(Clone, Copy)]
enum Target<'t> {
    VObj(&'t VObjType),
    Relation(&'t RelationType),
}

fn literal_type(v: &Value) -> ValueType {
    v.value_type()
}

/// Follows `parent` links; returns the chain (self first) or the cycle path.
fn lineage<'p>(start: &'p str, parent_of: &dyn Fn(&str) -> Option<&'p str>) -> Result<Vec<String>, Vec<String>> {
    let mut chain = vec![start.to_string()];
    let mut current = start;
    while let Some(p) = parent_of(current) {
        if let Some(pos) = chain.iter().position(|c| c == p) {
            let mut cycle = chain[pos..].to_vec();
            cycle.push(p.to_string());
            return Err(cycle);
        }
        chain.push(p.to_string());
        current = p;
    }
    Ok(chain)
}

/// Depth-first topological order over `deps`; returns the first cycle found.
fn topo_order(nodes: &BTreeMap<String, Vec<String>>) -> Result<Vec<String>, Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Visiting,
        Done,
    }
    fn visit(
        n: &str,
        nodes: &BTreeMap<String, Vec<String>>,
        marks: &mut BTreeMap<String, Mark>,
        path: &mut Vec<String>,
        out: &mut Vec<String>,
    ) -> Result<(), Vec<String>> {
        match marks.get(n) {
            Some(Mark::Done) => return Ok(()),
            Some(Mark::Visiting) => {
                let pos = path.iter().position(|p| p == n).unwrap_or(0);
                let mut cycle = path[pos..].to_vec();
                cycle.push(n.to_string());
                return Err(cycle);
            }
            None => {}
        }
        marks.insert(n.to_string(), Mark::Visiting);
        path.push(n.to_string());
        for d in nodes.get(n).into_iter().flatten() {
            if nodes.contains_key(d) {
                visit(d, nodes, marks, path, out)?;
            }
        }
        path.pop();
        marks.insert(n.to_string(), Mark::Done);
        out.push(n.to_string());
        Ok(())
    }
    let mut marks = BTreeMap::new();
    let mut out = Vec::new();
    for n in nodes.keys() {
        visit(n, nodes, &mut marks, &mut Vec::new(), &mut out)?;
    }
    Ok(out)
}

impl<'a> Validator<'a> {
    fn err(&mut self, span: Span, msg: impl Into<String>) {
        self.diags.push(Diagnostic::new(span, msg));
    }

    fn run(&mut self) -> Option<ValidatedProgram> {
        if !self.check_inheritance_cycles() {
            return None;
        }
        let vobjs = self.vobj_types();
        let relations = self.relation_types(&vobjs);
        let queries = self.queries(&vobjs, &relations);
        Some(ValidatedProgram {
            program: self.program.clone(),
            vobjs,
            relations,
            query_order: self.program.queries.iter().map(|q| q.name().to_string()).collect(),
            queries,
        })
    }

    fn check_inheritance_cycles(&mut self) -> bool {
        let p = self.program;
        let before = self.diags.len();
        let mut reported: BTreeSet<String> = BTreeSet::new();
        let mut report = |diags: &mut Vec<Diagnostic>, kind: &str, span: Span, cycle: Vec<String>| {
            let key: BTreeSet<String> = cycle.iter().cloned().collect();
            let key = format!("{kind}:{key:?}");
            if reported.insert(key) {
                diags.push(Diagnostic::new(span, format!("{kind} inheritance cycle: {}", cycle.join(" -> "))));
            }
        };
        let vparent = |n: &str| p.vobj(n).and_then(|v| v.parent.as_deref());
        for v in &p.vobjs {
            if let Err(cycle) = lineage(&v.name, &vparent) {
                report(&mut self.diags, "vobj", v.span, cycle);
            }
        }
        let rparent = |n: &str| p.relation(n).and_then(|r| r.parent.as_deref());
        for r in &p.relations {
            if let Err(cycle) = lineage(&r.name, &rparent) {
                report(&mut self.diags, "relation", r.span, cycle);
            }
        }
        let qparent = |n: &str| match p.query(n) {
            Some(QueryDecl::Basic(b)) => b.parent.as_deref(),
            _ => None,
        };
        for q in &p.queries {
            if let Err(cycle) = lineage(q.name(), &qparent) {
                report(&mut self.diags, "query", q.span(), cycle);
            }
        }
        // Composition cycles among higher-order queries.
        let graph: BTreeMap<String, Vec<String>> = p
            .queries
            .iter()
            .map(|q| (q.name().to_string(), q.operands().into_iter().map(str::to_string).collect()))
            .collect();
        if let Err(cycle) = topo_order(&graph) {
            let span = p.query(&cycle[0]).map(|q| q.span()).unwrap_or_default();
            self.err(span, format!("query composition cycle: {}", cycle.join(" -> ")));
        }
        self.diags.len() == before
    }

    fn check_property(&mut self, owner: &str, def: &PropertyDef, relation: bool) -> Option<ValueType> {
        if def.intrinsic && relation {
            self.err(def.span, format!("relation property `{}` of `{owner}` cannot be intrinsic", def.name));
        }
        if def.intrinsic && def.window().is_some() {
            self.err(def.span, format!("intrinsic property `{}` of `{owner}` must be stateless", def.name));
        }
        if def.window() == Some(0) {
            self.err(def.span, format!("stateful property `{}` of `{owner}` needs window >= 1", def.name));
        }
        match self.catalog.property_fn(&def.func.name) {
            None => {
                self.err(def.span, format!("property `{}` uses unregistered function `{}`", def.name, def.func.name));
                None
            }
            Some(sig) => {
                if let Some(arity) = sig.arity {
                    if arity != def.deps.len() {
                        self.err(
                            def.span,
                            format!(
                                "function `{}` takes {arity} dependencies, property `{}` lists {}",
                                def.func.name,
                                def.name,
                                def.deps.len()
                            ),
                        );
                    }
                }
                if sig.needs_window && def.window().is_none() {
                    self.err(
                        def.span,
                        format!("function `{}` needs a history window; declare `{}` @stateful", def.func.name, def.name),
                    );
                }
                Some(sig.returns)
            }
        }
    }

    fn vobj_types(&mut self) -> BTreeMap<String, VObjType> {
        let p = self.program;
        let mut decls: Vec<VObjDecl> = p.vobjs.clone();
        if p.vobj(SCENE).is_none() {
            decls.push(VObjDecl {
                name: SCENE.into(),
                parent: None,
                detector: None,
                classifiers: Vec::new(),
                frame_filters: Vec::new(),
                constraint: None,
                properties: Vec::new(),
                span: Span::default(),
            });
        }
        let by_name: BTreeMap<&str, &VObjDecl> = decls.iter().map(|d| (d.name.as_str(), d)).collect();
        let parent_of = |n: &str| by_name.get(n).and_then(|d| d.parent.as_deref());
        let mut out = BTreeMap::new();
        for decl in &decls {
            let chain = lineage(&decl.name, &parent_of).unwrap_or_else(|_| vec![decl.name.clone()]);
            if decl.name == SCENE && decl.parent.is_some() {
                self.err(decl.span, "`Scene` cannot extend another vobj");
            }
            if chain.iter().skip(1).any(|a| a == SCENE) {
                self.err(decl.span, format!("`{}` cannot extend `Scene`", decl.name));
            }
            let mut properties = BTreeMap::new();
            for ancestor in chain.iter().rev() {
                if let Some(d) = by_name.get(ancestor.as_str()) {
                    for prop in &d.properties {
                        properties.insert(prop.name.clone(), prop.clone());
                    }
                }
            }
            properties.entry("center".to_string()).or_insert_with(|| PropertyDef {
                name: "center".into(),
                kind: PropertyKind::Stateless,
                intrinsic: false,
                deps: vec![PropRef::bare("bbox")],
                func: FnCall { name: "center".into(), args: Vec::new() },
                span: Span::default(),
            });
            let mut types: BTreeMap<String, ValueType> =
                BUILTIN_PROPERTIES.iter().map(|(n, t)| (n.to_string(), *t)).collect();
            for (name, def) in &properties {
                let own = decl.properties.iter().any(|p| &p.name == name);
                let ty = if own {
                    self.check_property(&decl.name, def, false)
                } else {
                    self.catalog.property_fn(&def.func.name).map(|s| s.returns)
                };
                types.insert(name.clone(), ty.unwrap_or(ValueType::Any));
            }
            for prop in &decl.properties {
                for dep in &prop.deps {
                    if let Some(b) = &dep.binding {
                        self.err(prop.span, format!("vobj property dependency `{b}.{}` must be unqualified", dep.name));
                    } else if !types.contains_key(&dep.name) {
                        self.err(
                            prop.span,
                            format!("property `{}` of `{}` depends on undeclared `{}`", prop.name, decl.name, dep.name),
                        );
                    }
                }
            }
            let graph: BTreeMap<String, Vec<String>> = properties
                .iter()
                .map(|(n, d)| (n.clone(), d.deps.iter().map(|r| r.name.clone()).collect()))
                .collect();
            let order = match topo_order(&graph) {
                Ok(order) => order,
                Err(cycle) => {
                    if cycle.iter().any(|c| decl.properties.iter().any(|p| &p.name == c)) {
                        self.err(
                            decl.span,
                            format!("property dependency cycle in `{}`: {}", decl.name, cycle.join(" -> ")),
                        );
                    }
                    Vec::new()
                }
            };
            let own_detector = if decl.name == SCENE { Some(SCENE_DETECTOR.to_string()) } else { decl.detector.clone() };
            if let Some(det) = &decl.detector {
                if !self.catalog.has_detector(det) {
                    self.err(decl.span, format!("vobj `{}` names unregistered detector `{det}`", decl.name));
                }
            }
            let detector = chain
                .iter()
                .find_map(|a| {
                    if a == SCENE {
                        Some(SCENE_DETECTOR.to_string())
                    } else {
                        by_name.get(a.as_str()).and_then(|d| d.detector.clone())
                    }
                })
                .unwrap_or_else(|| {
                    self.err(decl.span, format!("vobj `{}` has no detector along its inheritance chain", decl.name));
                    String::new()
                });
            for c in &decl.classifiers {
                if !self.catalog.has_classifier(c) {
                    self.err(decl.span, format!("vobj `{}` names unregistered classifier `{c}`", decl.name));
                }
            }
            for f in &decl.frame_filters {
                if !self.catalog.has_frame_filter(f) {
                    self.err(decl.span, format!("vobj `{}` names unregistered frame filter `{f}`", decl.name));
                }
            }
            let ty = VObjType {
                name: decl.name.clone(),
                parent: decl.parent.clone(),
                lineage: chain,
                own_detector,
                detector,
                classifiers: decl.classifiers.clone(),
                frame_filters: decl.frame_filters.clone(),
                constraint: decl.constraint.clone(),
                properties,
                order,
                types,
            };
            if let Some(c) = &decl.constraint {
                for r in c.refs() {
                    if r.binding.is_some() {
                        self.err(decl.span, format!("vobj constraint reference `{r}` must be unqualified"));
                    }
                }
                let scope_ty = ty.clone();
                self.check_expr(c, decl.span, &|r: &PropRef| {
                    if r.binding.is_some() {
                        return Ok(ValueType::Any);
                    }
                    scope_ty
                        .types
                        .get(&r.name)
                        .copied()
                        .ok_or_else(|| format!("`{}` has no property `{}`", scope_ty.name, r.name))
                });
            }
            out.insert(decl.name.clone(), ty);
        }
        out
    }

    fn relation_types(&mut self, vobjs: &BTreeMap<String, VObjType>) -> BTreeMap<String, RelationType> {
        let p = self.program;
        let parent_of = |n: &str| p.relation(n).and_then(|r| r.parent.as_deref());
        let mut out = BTreeMap::new();
        for decl in &p.relations {
            let chain = lineage(&decl.name, &parent_of).unwrap_or_else(|_| vec![decl.name.clone()]);
            let participants = chain
                .iter()
                .filter_map(|n| p.relation(n))
                .find(|r| !r.participants.is_empty())
                .map(|r| r.participants.clone())
                .unwrap_or_default();
            if participants.len() < 2 {
                self.err(
                    decl.span,
                    format!("relation `{}` must relate at least two vobjs (arity {})", decl.name, participants.len()),
                );
            }
            let mut aliases = BTreeSet::new();
            for (alias, _) in &participants {
                if !aliases.insert(alias) {
                    self.err(decl.span, format!("relation `{}` repeats participant `{alias}`", decl.name));
                }
            }
            let mut properties = BTreeMap::new();
            for ancestor in chain.iter().rev() {
                if let Some(r) = p.relation(ancestor) {
                    for prop in &r.properties {
                        properties.insert(prop.name.clone(), prop.clone());
                    }
                }
            }
            let mut types = BTreeMap::new();
            for (name, def) in &properties {
                let own = decl.properties.iter().any(|p| &p.name == name);
                let ty = if own {
                    self.check_property(&decl.name, def, true)
                } else {
                    self.catalog.property_fn(&def.func.name).map(|s| s.returns)
                };
                types.insert(name.clone(), ty.unwrap_or(ValueType::Any));
            }
            for prop in &decl.properties {
                for dep in &prop.deps {
                    match &dep.binding {
                        Some(alias) => match participants.iter().find(|(a, _)| a == alias) {
                            None => self.err(
                                prop.span,
                                format!("`{}` is not a participant of relation `{}`", alias, decl.name),
                            ),
                            Some((_, ty)) => {
                                if !vobjs.get(ty).is_some_and(|t| t.has_property(&dep.name)) {
                                    self.err(prop.span, format!("`{ty}` has no property `{}`", dep.name));
                                }
                            }
                        },
                        None => {
                            if !properties.contains_key(&dep.name) {
                                self.err(
                                    prop.span,
                                    format!(
                                        "property `{}` of `{}` depends on undeclared `{}`",
                                        prop.name, decl.name, dep.name
                                    ),
                                );
                            }
                        }
                    }
                }
            }
            let graph: BTreeMap<String, Vec<String>> = properties
                .iter()
                .map(|(n, d)| {
                    (n.clone(), d.deps.iter().filter(|r| r.binding.is_none()).map(|r| r.name.clone()).collect())
                })
                .collect();
            let order = match topo_order(&graph) {
                Ok(o) => o,
                Err(cycle) => {
                    self.err(decl.span, format!("property dependency cycle in `{}`: {}", decl.name, cycle.join(" -> ")));
                    Vec::new()
                }
            };
            out.insert(
                decl.name.clone(),
                RelationType { name: decl.name.clone(), participants, properties, order, types },
            );
        }
        out
    }

    /// Walks a predicate, resolving each reference through `resolve` and
    /// checking comparison types.
    fn check_expr(&mut self, e: &Expr, span: Span, resolve: &dyn Fn(&PropRef) -> Result<ValueType, String>) {
        match e {
            Expr::And(items) | Expr::Or(items) => {
                for i in items {
                    self.check_expr(i, span, resolve);
                }
            }
            Expr::Not(inner) => self.check_expr(inner, span, resolve),
            Expr::Compare { lhs, op, rhs } => match resolve(lhs) {
                Err(msg) => self.err(span, msg),
                Ok(ty) => {
                    let lit = literal_type(rhs);
                    if op.is_ordering() && !(ty.compatible(ValueType::Num) && lit == ValueType::Num) {
                        self.err(
                            span,
                            format!("`{lhs} {} {}` compares non-numeric values", op.symbol(), super::print_literal(rhs)),
                        );
                    } else if !ty.compatible(lit) {
                        self.err(
                            span,
                            format!("type mismatch in `{lhs} {} {}`: {ty} vs {lit}", op.symbol(), super::print_literal(rhs)),
                        );
                    }
                }
            },
            Expr::In { lhs, set } => match resolve(lhs) {
                Err(msg) => self.err(span, msg),
                Ok(ty) => {
                    for item in set {
                        let lit = literal_type(item);
                        if !ty.compatible(lit) {
                            self.err(
                                span,
                                format!("type mismatch in `{lhs} in [..]`: {ty} vs {lit} ({})", super::print_literal(item)),
                            );
                        }
                    }
                }
            },
        }
    }

    fn resolve_in<'t>(scope: &BTreeMap<String, Target<'t>>, r: &PropRef) -> Result<ValueType, String> {
        let Some(b) = &r.binding else {
            return Err(format!("reference `{}` must be qualified by a binding", r.name));
        };
        match scope.get(b) {
            None => Err(format!("unknown binding `{b}`")),
            Some(Target::VObj(t)) => {
                t.types.get(&r.name).copied().ok_or_else(|| format!("`{}` has no property `{}`", t.name, r.name))
            }
            Some(Target::Relation(rel)) => rel
                .types
                .get(&r.name)
                .copied()
                .ok_or_else(|| format!("relation `{}` has no property `{}`", rel.name, r.name)),
        }
    }

    fn check_outputs(&mut self, outputs: &[OutputRef], scope: &BTreeMap<String, Target<'_>>, span: Span) {
        for o in outputs {
            match (scope.get(&o.binding), &o.property) {
                (None, _) => self.err(span, format!("frame_output names unknown binding `{}`", o.binding)),
                (Some(_), None) => {}
                (Some(_), Some(p)) => {
                    if let Err(msg) = Self::resolve_in(scope, &PropRef::qualified(&o.binding, p)) {
                        self.err(span, msg);
                    }
                }
            }
        }
    }

    fn check_relation_binding(
        &mut self,
        rb: &RelationBinding,
        relations: &BTreeMap<String, RelationType>,
        vobjs: &BTreeMap<String, VObjType>,
        bound: &dyn Fn(&str) -> Option<String>,
    ) {
        let Some(rel) = relations.get(&rb.relation) else {
            return;
        };
        if rel.participants.len() != rb.participants.len() {
            self.err(
                rb.span,
                format!(
                    "relation `{}` takes {} participants, binding `{}` gives {}",
                    rel.name,
                    rel.participants.len(),
                    rb.name,
                    rb.participants.len()
                ),
            );
            return;
        }
        for (arg, (alias, ty)) in rb.participants.iter().zip(&rel.participants) {
            match bound(arg) {
                None => self.err(rb.span, format!("relation binding `{}` names unknown vobj binding `{arg}`", rb.name)),
                Some(actual) => {
                    if !vobjs.get(&actual).is_some_and(|t| t.lineage.contains(ty)) {
                        self.err(
                            rb.span,
                            format!("`{arg}` is a `{actual}`, but relation `{}` expects `{alias}: {ty}`", rel.name),
                        );
                    }
                }
            }
        }
    }

    fn queries(
        &mut self,
        vobjs: &BTreeMap<String, VObjType>,
        relations: &BTreeMap<String, RelationType>,
    ) -> BTreeMap<String, ValidatedQuery> {
        let p = self.program;
        let mut out = BTreeMap::new();
        for q in &p.queries {
            let validated = match q {
                QueryDecl::Basic(b) => ValidatedQuery::Basic(self.basic(b, vobjs, relations)),
                QueryDecl::Spatial(s) => match self.spatial(s, vobjs, relations) {
                    Some(spec) => ValidatedQuery::Spatial(spec),
                    None => continue,
                },
                QueryDecl::Duration(d) => {
                    match p.query(&d.base).map(|b| b.kind()) {
                        Some(QueryKind::Basic) | Some(QueryKind::Spatial) | None => {}
                        Some(kind) => self.err(
                            d.span,
                            format!(
                                "duration query `{}` takes only basic or spatial queries, but `{}` is a {kind} query",
                                d.name, d.base
                            ),
                        ),
                    }
                    let zero = match d.min {
                        FrameSpan::Frames(n) => n == 0,
                        FrameSpan::Seconds(s) => s <= 0.0,
                    };
                    if zero {
                        self.err(d.span, format!("duration query `{}` needs min >= 1 frame", d.name));
                    }
                    ValidatedQuery::Duration(d.clone())
                }
                QueryDecl::Temporal(t) => ValidatedQuery::Temporal(t.clone()),
            };
            out.insert(q.name().to_string(), validated);
        }
        out
    }

    fn basic(
        &mut self,
        b: &BasicQuery,
        vobjs: &BTreeMap<String, VObjType>,
        relations: &BTreeMap<String, RelationType>,
    ) -> BasicSpec {
        let p = self.program;
        let parent_of = |n: &str| match p.query(n) {
            Some(QueryDecl::Basic(q)) => q.parent.as_deref(),
            _ => None,
        };
        let chain = lineage(&b.name, &parent_of).unwrap_or_else(|_| vec![b.name.clone()]);
        let decls: Vec<&BasicQuery> = chain
            .iter()
            .rev()
            .filter_map(|n| match p.query(n) {
                Some(QueryDecl::Basic(q)) => Some(q),
                _ => None,
            })
            .collect();

        let mut own_names = BTreeSet::new();
        for name in b.vobjs.iter().map(|v| &v.name).chain(b.relations.iter().map(|r| &r.name)) {
            if !own_names.insert(name.clone()) {
                self.err(b.span, format!("query `{}` binds `{name}` more than once", b.name));
            }
        }

        let mut bindings: Vec<VObjBinding> = Vec::new();
        let mut rel_bindings: Vec<RelationBinding> = Vec::new();
        for d in &decls {
            for vb in &d.vobjs {
                if let Some(existing) = bindings.iter_mut().find(|x| x.name == vb.name) {
                    let narrows = vobjs.get(&vb.vobj).is_some_and(|t| t.lineage.contains(&existing.vobj));
                    if !narrows && d.name == b.name {
                        self.err(
                            vb.span,
                            format!(
                                "`{}` rebinds `{}` as `{}`, which does not extend `{}`",
                                d.name, vb.name, vb.vobj, existing.vobj
                            ),
                        );
                    }
                    *existing = vb.clone();
                } else {
                    bindings.push(vb.clone());
                }
            }
            for rb in &d.relations {
                if let Some(existing) = rel_bindings.iter_mut().find(|x| x.name == rb.name) {
                    *existing = rb.clone();
                } else {
                    rel_bindings.push(rb.clone());
                }
            }
        }
        for vb in &bindings {
            if rel_bindings.iter().any(|r| r.name == vb.name) {
                self.err(vb.span, format!("`{}` is bound both as a vobj and as a relation", vb.name));
            }
        }

        let mut scope: BTreeMap<String, Target> = BTreeMap::new();
        for vb in &bindings {
            if let Some(t) = vobjs.get(&vb.vobj) {
                scope.insert(vb.name.clone(), Target::VObj(t));
            }
        }
        if b.relations.iter().any(|_| true) {
            let bound = |n: &str| bindings.iter().find(|x| x.name == n).map(|x| x.vobj.clone());
            for rb in &b.relations {
                self.check_relation_binding(rb, relations, vobjs, &bound);
            }
        }
        for rb in &rel_bindings {
            if let Some(r) = relations.get(&rb.relation) {
                scope.insert(rb.name.clone(), Target::Relation(r));
            }
        }

        if let Some(c) = &b.frame_constraint {
            self.check_expr(c, b.span, &|r| Self::resolve_in(&scope, r));
        }
        self.check_outputs(&b.frame_output, &scope, b.span);

        let frame_constraint = {
            let parts: Vec<Expr> = decls.iter().filter_map(|d| d.frame_constraint.clone()).collect();
            if parts.is_empty() {
                None
            } else {
                Some(Expr::and(parts))
            }
        };
        let frame_output =
            decls.iter().rev().find(|d| !d.frame_output.is_empty()).map(|d| d.frame_output.clone()).unwrap_or_default();

        let mut video_constraint: Option<VideoConstraint> = None;
        for d in &decls {
            if let Some(vc) = &d.video_constraint {
                video_constraint = Some(match video_constraint {
                    None => vc.clone(),
                    Some(prev) => {
                        if prev.quantifier != vc.quantifier {
                            self.err(d.span, format!("`{}` changes the video constraint quantifier of its parent", d.name));
                        }
                        VideoConstraint {
                            quantifier: vc.quantifier,
                            predicate: Expr::and(vec![prev.predicate, vc.predicate.clone()]),
                        }
                    }
                });
            }
        }
        let video_output = decls.iter().rev().find_map(|d| d.video_output);

        if let Some(vc) = &b.video_constraint {
            self.check_expr(&vc.predicate, b.span, &|r| Self::resolve_in(&scope, r));
        }
        if let Some(vc) = &video_constraint {
            let subjects = vc.predicate.bindings();
            let relation_refs = subjects.iter().any(|s| rel_bindings.iter().any(|r| &r.name == s));
            if subjects.len() != 1 || relation_refs {
                self.err(
                    b.span,
                    format!("video constraint of `{}` must reference exactly one vobj binding", b.name),
                );
            }
        }
        if frame_constraint.is_none() && video_constraint.is_none() {
            self.err(b.span, format!("query `{}` needs a frame_constraint or a video_constraint", b.name));
        }
        if video_output.is_some() && video_constraint.is_none() {
            self.err(b.span, format!("query `{}` has video_output but no video_constraint", b.name));
        }
        if bindings.is_empty() {
            self.err(b.span, format!("query `{}` binds no vobj", b.name));
        }

        BasicSpec {
            name: b.name.clone(),
            lineage: chain,
            vobjs: bindings,
            relations: rel_bindings,
            frame_constraint,
            frame_output,
            video_output: video_output.or(video_constraint.as_ref().map(|_| VideoOutput::Count)),
            video_constraint,
        }
    }

    fn spatial(
        &mut self,
        s: &SpatialQuery,
        vobjs: &BTreeMap<String, VObjType>,
        relations: &BTreeMap<String, RelationType>,
    ) -> Option<SpatialSpec> {
        let p = self.program;
        let mut subjects = Vec::new();
        for operand in [&s.left, &s.right] {
            match p.query(operand) {
                Some(QueryDecl::Basic(_)) => {
                    let own = {
                        let parent_of = |n: &str| match p.query(n) {
                            Some(QueryDecl::Basic(q)) => q.parent.as_deref(),
                            _ => None,
                        };
                        let chain = lineage(operand, &parent_of).unwrap_or_default();
                        let mut binds: Vec<VObjBinding> = Vec::new();
                        for n in chain.iter().rev() {
                            if let Some(QueryDecl::Basic(q)) = p.query(n) {
                                for vb in &q.vobjs {
                                    binds.retain(|x| x.name != vb.name);
                                    binds.push(vb.clone());
                                }
                            }
                        }
                        binds
                    };
                    if own.len() != 1 {
                        self.err(
                            s.span,
                            format!(
                                "spatial query `{}` needs `{operand}` to bind exactly one vobj, found {}",
                                s.name,
                                own.len()
                            ),
                        );
                        return None;
                    }
                    subjects.push(own[0].clone());
                }
                Some(other) => {
                    self.err(
                        s.span,
                        format!(
                            "spatial query `{}` takes only basic queries, but `{operand}` is a {} query",
                            s.name,
                            other.kind()
                        ),
                    );
                    return None;
                }
                None => return None,
            }
        }
        let (left, right) = (subjects[0].clone(), subjects[1].clone());
        let bound = |n: &str| match n {
            "left" => Some(left.vobj.clone()),
            "right" => Some(right.vobj.clone()),
            _ => None,
        };
        self.check_relation_binding(&s.relation, relations, vobjs, &bound);
        if s.relation.name == "left" || s.relation.name == "right" {
            self.err(s.relation.span, "relation binding cannot be named `left` or `right`");
        }
        let mut scope: BTreeMap<String, Target> = BTreeMap::new();
        if let Some(t) = vobjs.get(&left.vobj) {
            scope.insert("left".into(), Target::VObj(t));
        }
        if let Some(t) = vobjs.get(&right.vobj) {
            scope.insert("right".into(), Target::VObj(t));
        }
        if let Some(r) = relations.get(&s.relation.relation) {
            scope.insert(s.relation.name.clone(), Target::Relation(r));
        }
        if let Some(c) = &s.frame_constraint {
            self.check_expr(c, s.span, &|r| Self::resolve_in(&scope, r));
        }
        self.check_outputs(&s.frame_output, &scope, s.span);
        Some(SpatialSpec {
            name: s.name.clone(),
            left: s.left.clone(),
            right: s.right.clone(),
            left_binding: left.name,
            right_binding: right.name,
            left_type: left.vobj,
            right_type: right.vobj,
            relation: s.relation.clone(),
            frame_constraint: s.frame_constraint.clone(),
            frame_output: s.frame_output.clone(),
        })
    }
}
