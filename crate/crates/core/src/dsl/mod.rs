//! Query language: syntax tree, parser, printer and validator.

pub mod ast;
mod lexer;
mod parser;
mod print;
mod validate;

use std::fmt;

pub use ast::*;
pub use parser::{parse, parse_expr};
pub use print::{print_expr, print_literal, print_program};
pub use validate::{
    validate, BasicSpec, Catalog, FnSignature, RelationType, SpatialSpec, ValidatedProgram, ValidatedQuery, VObjType,
    BUILTIN_PROPERTIES,
};

/// Reserved VObj type with exactly one instance per frame.
pub const SCENE: &str = "Scene";

#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostic {
    pub span: Span,
    pub message: String,
}

impl Diagnostic {
    pub fn new(span: Span, message: impl Into<String>) -> Self {
        Diagnostic { span, message: message.into() }
    }

    /// `file:line:col: message`
    pub fn render(&self, file: &str) -> String {
        format!("{file}:{}:{}: {}", self.span.line, self.span.col, self.message)
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.span.line, self.span.col, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{}", .diagnostics.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n"))]
pub struct DslError {
    pub diagnostics: Vec<Diagnostic>,
}

impl DslError {
    pub fn render(&self, file: &str) -> String {
        self.diagnostics.iter().map(|d| d.render(file)).collect::<Vec<_>>().join("\n")
    }
}

impl From<Vec<Diagnostic>> for DslError {
    fn from(diagnostics: Vec<Diagnostic>) -> Self {
        DslError { diagnostics }
    }
}

/// Parses and validates in one step.
pub fn compile(src: &str, catalog: &dyn Catalog) -> Result<ValidatedProgram, DslError> {
    let program = parse(src)?;
    Ok(validate(&program, catalog)?)
}
