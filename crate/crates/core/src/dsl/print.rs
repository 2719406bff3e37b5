use std::fmt::Write;

use super::ast::*;
use crate::datamodel::Value;

/// Canonical source form of a program. Parsing the output yields an AST equal
/// to the input.
pub fn print_program(program: &Program) -> String {
    let mut out = String::new();
    for v in &program.vobjs {
        print_vobj(&mut out, v);
    }
    for r in &program.relations {
        print_relation(&mut out, r);
    }
    for q in &program.queries {
        print_query(&mut out, q);
    }
    out
}

pub fn print_literal(v: &Value) -> String {
    match v {
        Value::Undefined => "undefined".into(),
        Value::Bool(b) => b.to_string(),
        Value::Num(n) => format_num(*n),
        Value::Str(s) => format!("{s:?}"),
        Value::List(items) => format!("[{}]", items.iter().map(print_literal).collect::<Vec<_>>().join(", ")),
    }
}

fn format_num(n: f64) -> String {
    let s = format!("{n}");
    if s.contains("inf") || s.contains("NaN") {
        format!("{n:e}")
    } else {
        s
    }
}

pub fn print_expr(e: &Expr) -> String {
    let mut out = String::new();
    write_expr(&mut out, e, 0);
    out
}

/// `level`: 0 = or context, 1 = and context, 2 = operand of `!`.
fn write_expr(out: &mut String, e: &Expr, level: u8) {
    match e {
        Expr::Or(items) => {
            let wrap = level > 0;
            if wrap {
                out.push('(');
            }
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(" | ");
                }
                write_expr(out, item, 1);
            }
            if wrap {
                out.push(')');
            }
        }
        Expr::And(items) => {
            let wrap = level > 1;
            if wrap {
                out.push('(');
            }
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(" & ");
                }
                // Nested conjunctions are flattened on parse, so keep them grouped.
                let child_level = if matches!(item, Expr::And(_)) { 2 } else { 1 };
                write_expr(out, item, child_level);
            }
            if wrap {
                out.push(')');
            }
        }
        Expr::Not(inner) => {
            out.push('!');
            write_expr(out, inner, 2);
        }
        Expr::Compare { lhs, op, rhs } => {
            let _ = write!(out, "{lhs} {} {}", op.symbol(), print_literal(rhs));
        }
        Expr::In { lhs, set } => {
            let _ = write!(out, "{lhs} in {}", print_literal(&Value::List(set.clone())));
        }
    }
}

fn print_fn(f: &FnCall) -> String {
    if f.args.is_empty() {
        f.name.clone()
    } else {
        format!("{}({})", f.name, f.args.iter().map(print_literal).collect::<Vec<_>>().join(", "))
    }
}

fn print_property(out: &mut String, p: &PropertyDef) {
    let deps = p.deps.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ");
    let mut args = vec![format!("deps = [{deps}]")];
    let ann = match p.kind {
        PropertyKind::Stateless => "stateless",
        PropertyKind::Stateful { window } => {
            args.push(format!("window = {window}"));
            "stateful"
        }
    };
    if p.intrinsic {
        args.push("intrinsic = true".into());
    }
    let _ = writeln!(out, "    @{ann}({}) property {} = {};", args.join(", "), p.name, print_fn(&p.func));
}

fn print_vobj(out: &mut String, v: &VObjDecl) {
    let _ = write!(out, "vobj {}", v.name);
    if let Some(p) = &v.parent {
        let _ = write!(out, " extends {p}");
    }
    out.push_str(" {\n");
    if let Some(d) = &v.detector {
        let _ = writeln!(out, "    detector = {d:?};");
    }
    for c in &v.classifiers {
        let _ = writeln!(out, "    classifier = {c:?};");
    }
    for f in &v.frame_filters {
        let _ = writeln!(out, "    frame_filter = {f:?};");
    }
    if let Some(c) = &v.constraint {
        let _ = writeln!(out, "    constraint = {};", print_expr(c));
    }
    for p in &v.properties {
        print_property(out, p);
    }
    out.push_str("}\n\n");
}

fn print_relation(out: &mut String, r: &RelationDecl) {
    let _ = write!(out, "relation {}", r.name);
    if !r.participants.is_empty() {
        let parts: Vec<String> = r.participants.iter().map(|(a, t)| format!("{a}: {t}")).collect();
        let _ = write!(out, "({})", parts.join(", "));
    }
    if let Some(p) = &r.parent {
        let _ = write!(out, " extends {p}");
    }
    out.push_str(" {\n");
    for p in &r.properties {
        print_property(out, p);
    }
    out.push_str("}\n\n");
}

fn print_outputs(items: &[OutputRef]) -> String {
    format!("[{}]", items.iter().map(|o| o.to_string()).collect::<Vec<_>>().join(", "))
}

fn print_span(s: &FrameSpan) -> String {
    match s {
        FrameSpan::Frames(n) => n.to_string(),
        FrameSpan::Seconds(x) => format!("{}s", format_num(*x)),
    }
}

fn print_query(out: &mut String, q: &QueryDecl) {
    match q {
        QueryDecl::Basic(b) => {
            let _ = write!(out, "query {}", b.name);
            if let Some(p) = &b.parent {
                let _ = write!(out, " extends {p}");
            }
            out.push_str(" {\n");
            for v in &b.vobjs {
                let _ = writeln!(out, "    vobj {}: {};", v.name, v.vobj);
            }
            for r in &b.relations {
                let _ = writeln!(out, "    relation {} = {}({});", r.name, r.relation, r.participants.join(", "));
            }
            if let Some(c) = &b.frame_constraint {
                let _ = writeln!(out, "    frame_constraint = {};", print_expr(c));
            }
            if !b.frame_output.is_empty() {
                let _ = writeln!(out, "    frame_output = {};", print_outputs(&b.frame_output));
            }
            if let Some(vc) = &b.video_constraint {
                let q = match vc.quantifier {
                    Quantifier::All => "all",
                    Quantifier::Any => "any",
                };
                let _ = writeln!(out, "    video_constraint = {q}({});", print_expr(&vc.predicate));
            }
            if let Some(vo) = &b.video_output {
                let o = match vo {
                    VideoOutput::Count => "count",
                    VideoOutput::Tracks => "tracks",
                };
                let _ = writeln!(out, "    video_output = {o};");
            }
            out.push_str("}\n\n");
        }
        QueryDecl::Duration(d) => {
            let _ = writeln!(out, "duration query {} {{", d.name);
            let _ = writeln!(out, "    base = {};", d.base);
            let _ = writeln!(out, "    min = {};", print_span(&d.min));
            let _ = writeln!(out, "    gap = {};", d.gap);
            out.push_str("}\n\n");
        }
        QueryDecl::Spatial(s) => {
            let _ = writeln!(out, "spatial query {} {{", s.name);
            let _ = writeln!(out, "    left = {};", s.left);
            let _ = writeln!(out, "    right = {};", s.right);
            let _ = writeln!(out, "    relation {} = {};", s.relation.name, s.relation.relation);
            if let Some(c) = &s.frame_constraint {
                let _ = writeln!(out, "    frame_constraint = {};", print_expr(c));
            }
            if !s.frame_output.is_empty() {
                let _ = writeln!(out, "    frame_output = {};", print_outputs(&s.frame_output));
            }
            out.push_str("}\n\n");
        }
        QueryDecl::Temporal(t) => {
            let _ = writeln!(out, "temporal query {} {{", t.name);
            let _ = writeln!(out, "    first = {};", t.first);
            let _ = writeln!(out, "    then = {};", t.then);
            let _ = writeln!(out, "    within = {};", print_span(&t.within));
            out.push_str("}\n\n");
        }
    }
}


#[cfg(test)]
mod props {
    use proptest::prelude::*;

    use super::super::parser::parse_expr;
    use super::*;

    fn literal() -> impl Strategy<Value = Value> {
        prop_oneof![
            any::<bool>().prop_map(Value::Bool),
            (-1e6f64..1e6).prop_map(Value::Num),
            "[a-z \"\\\\]{0,6}".prop_map(Value::Str),
        ]
    }

    fn expr() -> impl Strategy<Value = Expr> {
        let op = prop_oneof![
            Just(CmpOp::Eq),
            Just(CmpOp::Ne),
            Just(CmpOp::Lt),
            Just(CmpOp::Le),
            Just(CmpOp::Gt),
            Just(CmpOp::Ge)
        ];
        let leaf = prop_oneof![
            ("[a-c]", "[x-z]", op, literal())
                .prop_map(|(b, n, op, rhs)| Expr::Compare { lhs: PropRef::qualified(&b, &n), op, rhs }),
            ("[a-c]", prop::collection::vec(literal(), 0..3))
                .prop_map(|(b, set)| Expr::In { lhs: PropRef::qualified(&b, "w"), set }),
        ];
        leaf.prop_recursive(4, 24, 4, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 2..4).prop_map(Expr::And),
                prop::collection::vec(inner.clone(), 2..4).prop_map(Expr::Or),
                inner.prop_map(|e| Expr::Not(Box::new(e))),
            ]
        })
    }

    proptest! {
        #[test]
        fn parse_print_parse_is_stable(e in expr()) {
            let once = parse_expr(&print_expr(&e)).unwrap();
            let twice = parse_expr(&print_expr(&once)).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
