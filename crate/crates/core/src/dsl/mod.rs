//! The visual-program language: lexer, parser, AST and tracing interpreter.

pub mod ast;
mod interp;
mod lexer;
mod parser;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ast::{quote, BoolOp, CompareOp, Expr, Literal, Program, Stmt};
pub use interp::{
    execute, fallback_program, run_with_fallback, BranchRecord, ExecutionTrace, StepRecord, TraceStatus, Value,
};
pub use parser::parse;

/// Name of the predefined variable bound to the full-image patch.
pub const ROOT_IMAGE: &str = "image";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseErrorKind {
    Lexical,
    Syntactic,
    Arity,
    UndefinedVariable,
    UnknownModule,
    MissingReturn,
    UnreachableCode,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParseErrorKind::Lexical => "lexical",
            ParseErrorKind::Syntactic => "syntactic",
            ParseErrorKind::Arity => "arity",
            ParseErrorKind::UndefinedVariable => "undefined variable",
            ParseErrorKind::UnknownModule => "unknown module",
            ParseErrorKind::MissingReturn => "missing return",
            ParseErrorKind::UnreachableCode => "unreachable code",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("{kind} error at {line}:{col}: {message}")]
pub struct ParseError {
    pub kind: ParseErrorKind,
    pub line: usize,
    pub col: usize,
    pub message: String,
}
