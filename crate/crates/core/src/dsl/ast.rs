use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datamodel::Value;

/// Source position. Spans never participate in AST equality, so a program
/// re-parsed from its printed form compares equal to the original.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct Span {
    pub line: usize,
    pub col: usize,
}

impl PartialEq for Span {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl Span {
    pub fn new(line: usize, col: usize) -> Self {
        Span { line, col }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Program {
    pub vobjs: Vec<VObjDecl>,
    pub relations: Vec<RelationDecl>,
    pub queries: Vec<QueryDecl>,
}

impl Program {
    pub fn is_empty(&self) -> bool {
        self.vobjs.is_empty() && self.relations.is_empty() && self.queries.is_empty()
    }

    pub fn vobj(&self, name: &str) -> Option<&VObjDecl> {
        self.vobjs.iter().find(|v| v.name == name)
    }

    pub fn relation(&self, name: &str) -> Option<&RelationDecl> {
        self.relations.iter().find(|r| r.name == name)
    }

    pub fn query(&self, name: &str) -> Option<&QueryDecl> {
        self.queries.iter().find(|q| q.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VObjDecl {
    pub name: String,
    pub parent: Option<String>,
    pub detector: Option<String>,
    pub classifiers: Vec<String>,
    pub frame_filters: Vec<String>,
    /// Predicate over the type's own properties that distinguishes its
    /// instances from the parent's.
    pub constraint: Option<Expr>,
    pub properties: Vec<PropertyDef>,
    pub span: Span,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PropertyKind {
    Stateless,
    Stateful { window: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyDef {
    pub name: String,
    pub kind: PropertyKind,
    pub intrinsic: bool,
    pub deps: Vec<PropRef>,
    pub func: FnCall,
    pub span: Span,
}

impl PropertyDef {
    pub fn window(&self) -> Option<usize> {
        match self.kind {
            PropertyKind::Stateless => None,
            PropertyKind::Stateful { window } => Some(window),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FnCall {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub args: Vec<Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationDecl {
    pub name: String,
    pub parent: Option<String>,
    /// `(alias, VObj type)` pairs; empty when inherited from the parent.
    pub participants: Vec<(String, String)>,
    pub properties: Vec<PropertyDef>,
    pub span: Span,
}

/// Property reference: `binding.name`, or a bare `name` inside a
/// declaration's own scope.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PropRef {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binding: Option<String>,
    pub name: String,
}

impl PropRef {
    pub fn bare(name: &str) -> Self {
        PropRef { binding: None, name: name.to_string() }
    }

    pub fn qualified(binding: &str, name: &str) -> Self {
        PropRef { binding: Some(binding.to_string()), name: name.to_string() }
    }
}

impl fmt::Display for PropRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.binding {
            Some(b) => write!(f, "{b}.{}", self.name),
            None => f.write_str(&self.name),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    pub fn is_ordering(self) -> bool {
        !matches!(self, CmpOp::Eq | CmpOp::Ne)
    }
}

/// Predicate tree over property references and literals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expr {
    And(Vec<Expr>),
    Or(Vec<Expr>),
    Not(Box<Expr>),
    Compare { lhs: PropRef, op: CmpOp, rhs: Value },
    In { lhs: PropRef, set: Vec<Value> },
}

impl Expr {
    /// Conjunction with nested conjunctions flattened.
    pub fn and(items: Vec<Expr>) -> Expr {
        let mut out = Vec::new();
        for item in items {
            match item {
                Expr::And(inner) => out.extend(inner),
                other => out.push(other),
            }
        }
        if out.len() == 1 {
            out.pop().unwrap()
        } else {
            Expr::And(out)
        }
    }

    pub fn or(items: Vec<Expr>) -> Expr {
        let mut out = Vec::new();
        for item in items {
            match item {
                Expr::Or(inner) => out.extend(inner),
                other => out.push(other),
            }
        }
        if out.len() == 1 {
            out.pop().unwrap()
        } else {
            Expr::Or(out)
        }
    }

    pub fn compare(binding: &str, name: &str, op: CmpOp, rhs: impl Into<Value>) -> Expr {
        Expr::Compare { lhs: PropRef::qualified(binding, name), op, rhs: rhs.into() }
    }

    /// Top-level conjuncts.
    pub fn conjuncts(&self) -> Vec<Expr> {
        match self {
            Expr::And(items) => items.clone(),
            other => vec![other.clone()],
        }
    }

    pub fn refs(&self) -> Vec<&PropRef> {
        let mut out = Vec::new();
        self.collect_refs(&mut out);
        out
    }

    fn collect_refs<'a>(&'a self, out: &mut Vec<&'a PropRef>) {
        match self {
            Expr::And(items) | Expr::Or(items) => items.iter().for_each(|e| e.collect_refs(out)),
            Expr::Not(inner) => inner.collect_refs(out),
            Expr::Compare { lhs, .. } | Expr::In { lhs, .. } => out.push(lhs),
        }
    }

    /// Distinct bindings referenced, in first-use order.
    pub fn bindings(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in self.refs() {
            if let Some(b) = &r.binding {
                if !out.contains(b) {
                    out.push(b.clone());
                }
            }
        }
        out
    }

    /// Rewrites every reference through `f`.
    pub fn map_refs(&self, f: &impl Fn(&PropRef) -> PropRef) -> Expr {
        match self {
            Expr::And(items) => Expr::And(items.iter().map(|e| e.map_refs(f)).collect()),
            Expr::Or(items) => Expr::Or(items.iter().map(|e| e.map_refs(f)).collect()),
            Expr::Not(inner) => Expr::Not(Box::new(inner.map_refs(f))),
            Expr::Compare { lhs, op, rhs } => Expr::Compare { lhs: f(lhs), op: *op, rhs: rhs.clone() },
            Expr::In { lhs, set } => Expr::In { lhs: f(lhs), set: set.clone() },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantifier {
    /// Holds on every frame where the track is present and the predicate's
    /// inputs are defined.
    All,
    /// Holds on at least one frame.
    Any,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoOutput {
    /// Number of distinct tracks satisfying the video constraint.
    Count,
    /// Ids of the satisfying tracks.
    Tracks,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoConstraint {
    pub quantifier: Quantifier,
    pub predicate: Expr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRef {
    pub binding: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub property: Option<String>,
}

impl fmt::Display for OutputRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.property {
            Some(p) => write!(f, "{}.{p}", self.binding),
            None => f.write_str(&self.binding),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VObjBinding {
    pub name: String,
    pub vobj: String,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationBinding {
    pub name: String,
    pub relation: String,
    pub participants: Vec<String>,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasicQuery {
    pub name: String,
    pub parent: Option<String>,
    pub vobjs: Vec<VObjBinding>,
    pub relations: Vec<RelationBinding>,
    pub frame_constraint: Option<Expr>,
    pub frame_output: Vec<OutputRef>,
    pub video_constraint: Option<VideoConstraint>,
    pub video_output: Option<VideoOutput>,
    pub span: Span,
}

/// A frame count, or seconds converted with the video frame rate at plan time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSpan {
    Frames(u64),
    Seconds(f64),
}

impl FrameSpan {
    pub fn to_frames(self, fps: f64) -> u64 {
        match self {
            FrameSpan::Frames(n) => n,
            FrameSpan::Seconds(s) => (s * fps).ceil().max(0.0) as u64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DurationQuery {
    pub name: String,
    pub base: String,
    pub min: FrameSpan,
    pub gap: u64,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialQuery {
    pub name: String,
    pub left: String,
    pub right: String,
    /// Relation binding over the two subjects, named `left` and `right`.
    pub relation: RelationBinding,
    pub frame_constraint: Option<Expr>,
    pub frame_output: Vec<OutputRef>,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalQuery {
    pub name: String,
    pub first: String,
    pub then: String,
    pub within: FrameSpan,
    pub span: Span,
}

#[derive(Clone, Debug, PartialEq)]
pub enum QueryDecl {
    Basic(BasicQuery),
    Duration(DurationQuery),
    Spatial(SpatialQuery),
    Temporal(TemporalQuery),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryKind {
    Basic,
    Duration,
    Spatial,
    Temporal,
}

impl fmt::Display for QueryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryKind::Basic => "basic",
            QueryKind::Duration => "duration",
            QueryKind::Spatial => "spatial",
            QueryKind::Temporal => "temporal",
        })
    }
}

impl QueryDecl {
    pub fn name(&self) -> &str {
        match self {
            QueryDecl::Basic(q) => &q.name,
            QueryDecl::Duration(q) => &q.name,
            QueryDecl::Spatial(q) => &q.name,
            QueryDecl::Temporal(q) => &q.name,
        }
    }

    pub fn span(&self) -> Span {
        match self {
            QueryDecl::Basic(q) => q.span,
            QueryDecl::Duration(q) => q.span,
            QueryDecl::Spatial(q) => q.span,
            QueryDecl::Temporal(q) => q.span,
        }
    }

    pub fn kind(&self) -> QueryKind {
        match self {
            QueryDecl::Basic(_) => QueryKind::Basic,
            QueryDecl::Duration(_) => QueryKind::Duration,
            QueryDecl::Spatial(_) => QueryKind::Spatial,
            QueryDecl::Temporal(_) => QueryKind::Temporal,
        }
    }

    /// Names of the queries this one composes.
    pub fn operands(&self) -> Vec<&str> {
        match self {
            QueryDecl::Basic(_) => Vec::new(),
            QueryDecl::Duration(q) => vec![&q.base],
            QueryDecl::Spatial(q) => vec![&q.left, &q.right],
            QueryDecl::Temporal(q) => vec![&q.first, &q.then],
        }
    }
}
