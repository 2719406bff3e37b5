use std::collections::BTreeSet;

use super::ast::*;
use super::lexer::{tokenize, Tok, Token};
use super::{Diagnostic, SCENE};
use crate::datamodel::Value;

/// Parses a program and resolves declaration names. Binding-level checks
/// are left to [`super::validate`].
pub fn parse(src: &str) -> Result<Program, Vec<Diagnostic>> {
    let tokens = tokenize(src).map_err(|d| vec![d])?;
    let mut parser = Parser { tokens, pos: 0 };
    let program = parser.program().map_err(|d| vec![d])?;
    let diags = resolve_names(&program);
    if diags.is_empty() {
        Ok(program)
    } else {
        Err(diags)
    }
}

/// Parses a standalone predicate expression.
pub fn parse_expr(src: &str) -> Result<Expr, Diagnostic> {
    let tokens = tokenize(src)?;
    let mut parser = Parser { tokens, pos: 0 };
    let e = parser.expr()?;
    parser.expect(Tok::Eof)?;
    Ok(e)
}

type PResult<T> = Result<T, Diagnostic>;

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.tokens[self.pos].tok
    }

    fn span(&self) -> Span {
        self.tokens[self.pos].span
    }

    fn advance(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if self.pos + 1 < self.tokens.len() {
            self.pos += 1;
        }
        t
    }

    fn error<T>(&self, expected: &str) -> PResult<T> {
        Err(Diagnostic::new(self.span(), format!("expected {expected}, found {}", self.peek().describe())))
    }

    fn expect(&mut self, tok: Tok) -> PResult<Span> {
        if *self.peek() == tok {
            Ok(self.advance().span)
        } else {
            self.error(&tok.describe())
        }
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek() == tok {
            self.advance();
            true
        } else {
            false
        }
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    fn keyword(&mut self, kw: &str) -> PResult<Span> {
        if self.is_keyword(kw) {
            Ok(self.advance().span)
        } else {
            self.error(&format!("`{kw}`"))
        }
    }

    fn ident(&mut self) -> PResult<(String, Span)> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                let span = self.advance().span;
                Ok((s, span))
            }
            _ => self.error("identifier"),
        }
    }

    fn string(&mut self) -> PResult<String> {
        match self.peek().clone() {
            Tok::Str(s) => {
                self.advance();
                Ok(s)
            }
            _ => self.error("string literal"),
        }
    }

    fn count(&mut self) -> PResult<u64> {
        match *self.peek() {
            Tok::Num(n) if n >= 0.0 && n.fract() == 0.0 => {
                self.advance();
                Ok(n as u64)
            }
            _ => self.error("non-negative integer"),
        }
    }

    fn frame_span(&mut self) -> PResult<FrameSpan> {
        match *self.peek() {
            Tok::Seconds(s) if s >= 0.0 => {
                self.advance();
                Ok(FrameSpan::Seconds(s))
            }
            _ => Ok(FrameSpan::Frames(self.count()?)),
        }
    }

    fn program(&mut self) -> PResult<Program> {
        let mut program = Program::default();
        loop {
            let span = self.span();
            match self.peek().clone() {
                Tok::Eof => return Ok(program),
                Tok::Ident(kw) => {
                    self.advance();
                    match kw.as_str() {
                        "vobj" => program.vobjs.push(self.vobj(span)?),
                        "relation" => program.relations.push(self.relation(span)?),
                        "query" => program.queries.push(QueryDecl::Basic(self.basic_query(span)?)),
                        "duration" => {
                            self.keyword("query")?;
                            program.queries.push(QueryDecl::Duration(self.duration_query(span)?));
                        }
                        "spatial" => {
                            self.keyword("query")?;
                            program.queries.push(QueryDecl::Spatial(self.spatial_query(span)?));
                        }
                        "temporal" => {
                            self.keyword("query")?;
                            program.queries.push(QueryDecl::Temporal(self.temporal_query(span)?));
                        }
                        _ => {
                            return Err(Diagnostic::new(
                                span,
                                format!("expected declaration (vobj, relation, query), found `{kw}`"),
                            ))
                        }
                    }
                }
                _ => return self.error("declaration"),
            }
        }
    }

    fn parent(&mut self) -> PResult<Option<String>> {
        if self.is_keyword("extends") {
            self.advance();
            Ok(Some(self.ident()?.0))
        } else {
            Ok(None)
        }
    }

    /// Guards against a singular member appearing twice in one block.
    fn once(seen: &mut BTreeSet<String>, key: &str, span: Span) -> PResult<()> {
        if seen.insert(key.to_string()) {
            Ok(())
        } else {
            Err(Diagnostic::new(span, format!("`{key}` given more than once")))
        }
    }

    fn vobj(&mut self, span: Span) -> PResult<VObjDecl> {
        let (name, _) = self.ident()?;
        let parent = self.parent()?;
        self.expect(Tok::LBrace)?;
        let mut decl = VObjDecl {
            name,
            parent,
            detector: None,
            classifiers: Vec::new(),
            frame_filters: Vec::new(),
            constraint: None,
            properties: Vec::new(),
            span,
        };
        let mut seen = BTreeSet::new();
        while !self.eat(&Tok::RBrace) {
            let member_span = self.span();
            if matches!(self.peek(), Tok::At) || self.is_keyword("property") {
                decl.properties.push(self.property()?);
                continue;
            }
            let (key, _) = self.ident()?;
            self.expect(Tok::Assign)?;
            match key.as_str() {
                "detector" => {
                    Self::once(&mut seen, &key, member_span)?;
                    decl.detector = Some(self.string()?);
                }
                "classifier" => decl.classifiers.push(self.string()?),
                "frame_filter" => decl.frame_filters.push(self.string()?),
                "constraint" => {
                    Self::once(&mut seen, &key, member_span)?;
                    decl.constraint = Some(self.expr()?);
                }
                _ => return Err(Diagnostic::new(member_span, format!("unknown vobj member `{key}`"))),
            }
            self.expect(Tok::Semi)?;
        }
        Ok(decl)
    }

    fn property(&mut self) -> PResult<PropertyDef> {
        let span = self.span();
        let mut kind = None;
        let mut intrinsic = false;
        let mut deps = Vec::new();
        while self.eat(&Tok::At) {
            let (ann, ann_span) = self.ident()?;
            match ann.as_str() {
                "stateless" | "stateful" => {
                    if kind.is_some() {
                        return Err(Diagnostic::new(ann_span, "property kind annotated more than once"));
                    }
                    let mut window = None;
                    if self.eat(&Tok::LParen) {
                        loop {
                            let (arg, arg_span) = self.ident()?;
                            match arg.as_str() {
                                "deps" => {
                                    self.expect(Tok::Assign)?;
                                    self.expect(Tok::LBracket)?;
                                    while !self.eat(&Tok::RBracket) {
                                        deps.push(self.prop_ref()?);
                                        if !self.eat(&Tok::Comma) {
                                            self.expect(Tok::RBracket)?;
                                            break;
                                        }
                                    }
                                }
                                "window" => {
                                    self.expect(Tok::Assign)?;
                                    window = Some(self.count()? as usize);
                                }
                                "intrinsic" => {
                                    intrinsic = if self.eat(&Tok::Assign) { self.boolean()? } else { true };
                                }
                                _ => {
                                    return Err(Diagnostic::new(arg_span, format!("unknown annotation argument `{arg}`")))
                                }
                            }
                            if !self.eat(&Tok::Comma) {
                                break;
                            }
                        }
                        self.expect(Tok::RParen)?;
                    }
                    kind = Some(if ann == "stateful" {
                        PropertyKind::Stateful {
                            window: window
                                .ok_or_else(|| Diagnostic::new(ann_span, "@stateful requires `window = k`"))?,
                        }
                    } else {
                        if window.is_some() {
                            return Err(Diagnostic::new(ann_span, "`window` only applies to @stateful"));
                        }
                        PropertyKind::Stateless
                    });
                }
                "intrinsic" => intrinsic = true,
                _ => return Err(Diagnostic::new(ann_span, format!("unknown annotation `@{ann}`"))),
            }
        }
        self.keyword("property")?;
        let (name, _) = self.ident()?;
        self.expect(Tok::Assign)?;
        let func = self.fn_call()?;
        self.expect(Tok::Semi)?;
        Ok(PropertyDef { name, kind: kind.unwrap_or(PropertyKind::Stateless), intrinsic, deps, func, span })
    }

    fn boolean(&mut self) -> PResult<bool> {
        if self.is_keyword("true") {
            self.advance();
            Ok(true)
        } else if self.is_keyword("false") {
            self.advance();
            Ok(false)
        } else {
            self.error("`true` or `false`")
        }
    }

    fn fn_call(&mut self) -> PResult<FnCall> {
        let (name, _) = self.ident()?;
        let mut args = Vec::new();
        if self.eat(&Tok::LParen) {
            while !self.eat(&Tok::RParen) {
                args.push(self.literal()?);
                if !self.eat(&Tok::Comma) {
                    self.expect(Tok::RParen)?;
                    break;
                }
            }
        }
        Ok(FnCall { name, args })
    }

    fn relation(&mut self, span: Span) -> PResult<RelationDecl> {
        let (name, _) = self.ident()?;
        let mut participants = Vec::new();
        if self.eat(&Tok::LParen) {
            while !self.eat(&Tok::RParen) {
                let (alias, _) = self.ident()?;
                self.expect(Tok::Colon)?;
                let (ty, _) = self.ident()?;
                participants.push((alias, ty));
                if !self.eat(&Tok::Comma) {
                    self.expect(Tok::RParen)?;
                    break;
                }
            }
        }
        let parent = self.parent()?;
        self.expect(Tok::LBrace)?;
        let mut properties = Vec::new();
        while !self.eat(&Tok::RBrace) {
            properties.push(self.property()?);
        }
        Ok(RelationDecl { name, parent, participants, properties, span })
    }

    fn basic_query(&mut self, span: Span) -> PResult<BasicQuery> {
        let (name, _) = self.ident()?;
        let parent = self.parent()?;
        self.expect(Tok::LBrace)?;
        let mut q = BasicQuery {
            name,
            parent,
            vobjs: Vec::new(),
            relations: Vec::new(),
            frame_constraint: None,
            frame_output: Vec::new(),
            video_constraint: None,
            video_output: None,
            span,
        };
        let mut seen = BTreeSet::new();
        while !self.eat(&Tok::RBrace) {
            let member_span = self.span();
            let (key, _) = self.ident()?;
            match key.as_str() {
                "vobj" => {
                    let (binding, _) = self.ident()?;
                    self.expect(Tok::Colon)?;
                    let (vobj, _) = self.ident()?;
                    q.vobjs.push(VObjBinding { name: binding, vobj, span: member_span });
                }
                "relation" => q.relations.push(self.relation_binding(member_span, true)?),
                "frame_constraint" => {
                    Self::once(&mut seen, &key, member_span)?;
                    self.expect(Tok::Assign)?;
                    q.frame_constraint = Some(self.expr()?);
                }
                "frame_output" => {
                    Self::once(&mut seen, &key, member_span)?;
                    self.expect(Tok::Assign)?;
                    q.frame_output = self.output_list()?;
                }
                "video_constraint" => {
                    Self::once(&mut seen, &key, member_span)?;
                    self.expect(Tok::Assign)?;
                    let (quant, qspan) = self.ident()?;
                    let quantifier = match quant.as_str() {
                        "all" => Quantifier::All,
                        "any" => Quantifier::Any,
                        _ => return Err(Diagnostic::new(qspan, format!("expected `all` or `any`, found `{quant}`"))),
                    };
                    self.expect(Tok::LParen)?;
                    let predicate = self.expr()?;
                    self.expect(Tok::RParen)?;
                    q.video_constraint = Some(VideoConstraint { quantifier, predicate });
                }
                "video_output" => {
                    Self::once(&mut seen, &key, member_span)?;
                    self.expect(Tok::Assign)?;
                    let (out, ospan) = self.ident()?;
                    q.video_output = Some(match out.as_str() {
                        "count" => VideoOutput::Count,
                        "tracks" => VideoOutput::Tracks,
                        _ => return Err(Diagnostic::new(ospan, format!("expected `count` or `tracks`, found `{out}`"))),
                    });
                }
                _ => return Err(Diagnostic::new(member_span, format!("unknown query member `{key}`"))),
            }
            self.expect(Tok::Semi)?;
        }
        Ok(q)
    }

    fn relation_binding(&mut self, span: Span, with_participants: bool) -> PResult<RelationBinding> {
        let (name, _) = self.ident()?;
        self.expect(Tok::Assign)?;
        let (relation, _) = self.ident()?;
        let mut participants = Vec::new();
        if with_participants {
            self.expect(Tok::LParen)?;
            while !self.eat(&Tok::RParen) {
                participants.push(self.ident()?.0);
                if !self.eat(&Tok::Comma) {
                    self.expect(Tok::RParen)?;
                    break;
                }
            }
        } else {
            participants = vec!["left".to_string(), "right".to_string()];
        }
        Ok(RelationBinding { name, relation, participants, span })
    }

    fn output_list(&mut self) -> PResult<Vec<OutputRef>> {
        self.expect(Tok::LBracket)?;
        let mut out = Vec::new();
        while !self.eat(&Tok::RBracket) {
            let (binding, _) = self.ident()?;
            let property = if self.eat(&Tok::Dot) { Some(self.ident()?.0) } else { None };
            out.push(OutputRef { binding, property });
            if !self.eat(&Tok::Comma) {
                self.expect(Tok::RBracket)?;
                break;
            }
        }
        Ok(out)
    }

    fn duration_query(&mut self, span: Span) -> PResult<DurationQuery> {
        let (name, _) = self.ident()?;
        self.expect(Tok::LBrace)?;
        let (mut base, mut min, mut gap) = (None, None, 0);
        let mut seen = BTreeSet::new();
        while !self.eat(&Tok::RBrace) {
            let (key, kspan) = self.ident()?;
            Self::once(&mut seen, &key, kspan)?;
            self.expect(Tok::Assign)?;
            match key.as_str() {
                "base" => base = Some(self.ident()?.0),
                "min" => min = Some(self.frame_span()?),
                "gap" => gap = self.count()?,
                _ => return Err(Diagnostic::new(kspan, format!("unknown duration query member `{key}`"))),
            }
            self.expect(Tok::Semi)?;
        }
        Ok(DurationQuery {
            name,
            base: base.ok_or_else(|| Diagnostic::new(span, "duration query needs `base`"))?,
            min: min.ok_or_else(|| Diagnostic::new(span, "duration query needs `min`"))?,
            gap,
            span,
        })
    }

    fn spatial_query(&mut self, span: Span) -> PResult<SpatialQuery> {
        let (name, _) = self.ident()?;
        self.expect(Tok::LBrace)?;
        let (mut left, mut right, mut relation, mut fc, mut fo) = (None, None, None, None, Vec::new());
        let mut seen = BTreeSet::new();
        while !self.eat(&Tok::RBrace) {
            let (key, kspan) = self.ident()?;
            Self::once(&mut seen, &key, kspan)?;
            match key.as_str() {
                "left" | "right" => {
                    self.expect(Tok::Assign)?;
                    let q = Some(self.ident()?.0);
                    if key == "left" {
                        left = q;
                    } else {
                        right = q;
                    }
                }
                "relation" => relation = Some(self.relation_binding(kspan, false)?),
                "frame_constraint" => {
                    self.expect(Tok::Assign)?;
                    fc = Some(self.expr()?);
                }
                "frame_output" => {
                    self.expect(Tok::Assign)?;
                    fo = self.output_list()?;
                }
                _ => return Err(Diagnostic::new(kspan, format!("unknown spatial query member `{key}`"))),
            }
            self.expect(Tok::Semi)?;
        }
        Ok(SpatialQuery {
            name,
            left: left.ok_or_else(|| Diagnostic::new(span, "spatial query needs `left`"))?,
            right: right.ok_or_else(|| Diagnostic::new(span, "spatial query needs `right`"))?,
            relation: relation.ok_or_else(|| Diagnostic::new(span, "spatial query needs `relation`"))?,
            frame_constraint: fc,
            frame_output: fo,
            span,
        })
    }

    fn temporal_query(&mut self, span: Span) -> PResult<TemporalQuery> {
        let (name, _) = self.ident()?;
        self.expect(Tok::LBrace)?;
        let (mut first, mut then, mut within) = (None, None, None);
        let mut seen = BTreeSet::new();
        while !self.eat(&Tok::RBrace) {
            let (key, kspan) = self.ident()?;
            Self::once(&mut seen, &key, kspan)?;
            self.expect(Tok::Assign)?;
            match key.as_str() {
                "first" => first = Some(self.ident()?.0),
                "then" => then = Some(self.ident()?.0),
                "within" => within = Some(self.frame_span()?),
                _ => return Err(Diagnostic::new(kspan, format!("unknown temporal query member `{key}`"))),
            }
            self.expect(Tok::Semi)?;
        }
        Ok(TemporalQuery {
            name,
            first: first.ok_or_else(|| Diagnostic::new(span, "temporal query needs `first`"))?,
            then: then.ok_or_else(|| Diagnostic::new(span, "temporal query needs `then`"))?,
            within: within.ok_or_else(|| Diagnostic::new(span, "temporal query needs `within`"))?,
            span,
        })
    }

    fn prop_ref(&mut self) -> PResult<PropRef> {
        let (first, _) = self.ident()?;
        if self.eat(&Tok::Dot) {
            let (second, _) = self.ident()?;
            Ok(PropRef { binding: Some(first), name: second })
        } else {
            Ok(PropRef { binding: None, name: first })
        }
    }

    fn literal(&mut self) -> PResult<Value> {
        match self.peek().clone() {
            Tok::Str(s) => {
                self.advance();
                Ok(Value::Str(s))
            }
            Tok::Num(n) => {
                self.advance();
                Ok(Value::Num(n))
            }
            Tok::Ident(s) if s == "true" || s == "false" => {
                self.advance();
                Ok(Value::Bool(s == "true"))
            }
            Tok::LBracket => {
                self.advance();
                Ok(Value::List(self.literal_list_tail()?))
            }
            _ => self.error("literal"),
        }
    }

    /// Parses list items after the opening bracket.
    fn literal_list_tail(&mut self) -> PResult<Vec<Value>> {
        let mut items = Vec::new();
        while !self.eat(&Tok::RBracket) {
            items.push(self.literal()?);
            if !self.eat(&Tok::Comma) {
                self.expect(Tok::RBracket)?;
                break;
            }
        }
        Ok(items)
    }

    fn expr(&mut self) -> PResult<Expr> {
        let mut items = vec![self.and_expr()?];
        while self.eat(&Tok::Pipe) {
            items.push(self.and_expr()?);
        }
        Ok(Expr::or(items))
    }

    fn and_expr(&mut self) -> PResult<Expr> {
        let mut items = vec![self.unary()?];
        while self.eat(&Tok::Amp) {
            items.push(self.unary()?);
        }
        Ok(Expr::and(items))
    }

    fn unary(&mut self) -> PResult<Expr> {
        if self.eat(&Tok::Bang) {
            return Ok(Expr::Not(Box::new(self.unary()?)));
        }
        if self.eat(&Tok::LParen) {
            let e = self.expr()?;
            self.expect(Tok::RParen)?;
            return Ok(e);
        }
        let lhs = self.prop_ref()?;
        if self.is_keyword("in") {
            self.advance();
            self.expect(Tok::LBracket)?;
            let set = self.literal_list_tail()?;
            return Ok(Expr::In { lhs, set });
        }
        let op = match self.peek() {
            Tok::Cmp("==") => CmpOp::Eq,
            Tok::Cmp("!=") => CmpOp::Ne,
            Tok::Cmp("<") => CmpOp::Lt,
            Tok::Cmp("<=") => CmpOp::Le,
            Tok::Cmp(">") => CmpOp::Gt,
            Tok::Cmp(">=") => CmpOp::Ge,
            _ => return self.error("comparison operator or `in`"),
        };
        self.advance();
        let rhs = self.literal()?;
        Ok(Expr::Compare { lhs, op, rhs })
    }
}

fn resolve_names(program: &Program) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let mut names = BTreeSet::new();
    for v in &program.vobjs {
        if !names.insert(v.name.clone()) {
            diags.push(Diagnostic::new(v.span, format!("duplicate vobj `{}`", v.name)));
        }
        let mut props = BTreeSet::new();
        for p in &v.properties {
            if !props.insert(&p.name) {
                diags.push(Diagnostic::new(p.span, format!("duplicate property `{}` in `{}`", p.name, v.name)));
            }
        }
    }
    let vobj_exists = |n: &str| n == SCENE || program.vobj(n).is_some();
    let mut rel_names = BTreeSet::new();
    for r in &program.relations {
        if !rel_names.insert(r.name.clone()) {
            diags.push(Diagnostic::new(r.span, format!("duplicate relation `{}`", r.name)));
        }
        let mut props = BTreeSet::new();
        for p in &r.properties {
            if !props.insert(&p.name) {
                diags.push(Diagnostic::new(p.span, format!("duplicate property `{}` in `{}`", p.name, r.name)));
            }
        }
    }
    let mut query_names = BTreeSet::new();
    for q in &program.queries {
        if !query_names.insert(q.name().to_string()) {
            diags.push(Diagnostic::new(q.span(), format!("duplicate query `{}`", q.name())));
        }
    }

    for v in &program.vobjs {
        if let Some(p) = &v.parent {
            if !vobj_exists(p) {
                diags.push(Diagnostic::new(v.span, format!("`{}` extends undeclared vobj `{p}`", v.name)));
            }
        }
    }
    for r in &program.relations {
        for (alias, ty) in &r.participants {
            if !vobj_exists(ty) {
                diags.push(Diagnostic::new(
                    r.span,
                    format!("relation `{}` participant `{alias}` has undeclared vobj type `{ty}`", r.name),
                ));
            }
        }
        if let Some(p) = &r.parent {
            if program.relation(p).is_none() {
                diags.push(Diagnostic::new(r.span, format!("`{}` extends undeclared relation `{p}`", r.name)));
            }
        }
    }
    for q in &program.queries {
        match q {
            QueryDecl::Basic(b) => {
                if let Some(p) = &b.parent {
                    match program.query(p) {
                        Some(QueryDecl::Basic(_)) => {}
                        Some(_) => diags.push(Diagnostic::new(
                            b.span,
                            format!("`{}` extends `{p}`, which is not a basic query", b.name),
                        )),
                        None => diags.push(Diagnostic::new(b.span, format!("`{}` extends undeclared query `{p}`", b.name))),
                    }
                }
                for vb in &b.vobjs {
                    if !vobj_exists(&vb.vobj) {
                        diags.push(Diagnostic::new(vb.span, format!("undeclared vobj `{}`", vb.vobj)));
                    }
                }
                for rb in &b.relations {
                    if program.relation(&rb.relation).is_none() {
                        diags.push(Diagnostic::new(rb.span, format!("undeclared relation `{}`", rb.relation)));
                    }
                }
            }
            QueryDecl::Spatial(s) => {
                if program.relation(&s.relation.relation).is_none() {
                    diags.push(Diagnostic::new(s.relation.span, format!("undeclared relation `{}`", s.relation.relation)));
                }
            }
            QueryDecl::Duration(_) | QueryDecl::Temporal(_) => {}
        }
        for operand in q.operands() {
            if program.query(operand).is_none() {
                diags.push(Diagnostic::new(
                    q.span(),
                    format!("`{}` refers to undeclared query `{operand}`", q.name()),
                ));
            }
        }
    }
    diags
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const VEHICLE: &str = r#"
        vobj Vehicle {
            detector = "yolox";
            @stateless(deps = [bbox]) property center = center;
            @stateful(deps = [center], window = 5) property direction = direction;
            @stateless(intrinsic) property color = attr("color");
        }
    "#;

    #[test]
    fn vehicle_declares_three_properties() {
        let p = parse(VEHICLE).unwrap();
        let v = &p.vobjs[0];
        assert_eq!(v.properties.len(), 3);
        assert_eq!(v.properties[1].kind, PropertyKind::Stateful { window: 5 });
        assert!(v.properties[2].intrinsic);
        assert_eq!(v.properties[2].func.args, vec![Value::from("color")]);
    }

    #[test]
    fn empty_program() {
        assert!(parse("").unwrap().is_empty());
        assert!(parse("  # only a comment\n").unwrap().is_empty());
    }

    #[test]
    fn undeclared_vobj_is_a_resolution_error() {
        let src = "vobj Truck { detector = \"yolox\"; }\nquery Q { vobj t: Trck; frame_constraint = t.score > 0.5; }";
        let errs = parse(src).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert!(errs[0].message.contains("undeclared vobj `Trck`"), "{}", errs[0]);
        assert_eq!(errs[0].span.line, 2);
    }

    #[test]
    fn syntax_error_has_line_and_column() {
        let errs = parse("vobj A {\n  detector = yolox;\n}").unwrap_err();
        assert_eq!((errs[0].span.line, errs[0].span.col), (2, 14));
        assert!(errs[0].message.contains("string literal"));
    }

    #[test]
    fn duplicate_declarations() {
        let errs = parse("vobj A {} vobj A {}").unwrap_err();
        assert!(errs[0].message.contains("duplicate vobj `A`"));
        let errs = parse("vobj A {} query Q { vobj a: A; } query Q { vobj a: A; }").unwrap_err();
        assert!(errs[0].message.contains("duplicate query `Q`"));
    }

    #[test]
    fn precedence_and_binds_tighter_than_or() {
        let e = parse_expr("a.x == 1 | a.y == 2 & !a.z == 3").unwrap();
        match e {
            Expr::Or(items) => {
                assert_eq!(items.len(), 2);
                assert!(matches!(&items[1], Expr::And(v) if v.len() == 2 && matches!(v[1], Expr::Not(_))));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn in_operator_and_lists() {
        let e = parse_expr(r#"c.color in ["red", "blue"]"#).unwrap();
        assert_eq!(e, Expr::In { lhs: PropRef::qualified("c", "color"), set: vec!["red".into(), "blue".into()] });
    }

    #[test]
    fn higher_order_forms() {
        let src = r#"
            vobj Person { detector = "person_detector"; }
            relation Near(p: Person, q: Person) { property distance = distance; }
            query A { vobj p: Person; frame_constraint = p.score > 0.1; }
            duration query D { base = A; min = 2.5s; gap = 1; }
            spatial query S { left = A; right = A; relation near = Near; frame_constraint = near.distance < 3; }
            temporal query T { first = D; then = S; within = 30; }
        "#;
        let p = parse(src).unwrap();
        assert_eq!(p.queries.len(), 4);
        match &p.queries[1] {
            QueryDecl::Duration(d) => {
                assert_eq!(d.min, FrameSpan::Seconds(2.5));
                assert_eq!(d.gap, 1);
            }
            _ => panic!(),
        }
        match &p.queries[2] {
            QueryDecl::Spatial(s) => assert_eq!(s.relation.participants, vec!["left", "right"]),
            _ => panic!(),
        }
    }
}
