use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::registry::ModuleKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Literal {
    Str(String),
    Bool(bool),
    Num(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompareOp {
    Eq,
    Ne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoolOp {
    And,
    Or,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Call {
        module: ModuleKind,
        receiver: Box<Expr>,
        args: Vec<Expr>,
    },
    Var(String),
    Index(Box<Expr>, i64),
    Literal(Literal),
    List(Vec<Expr>),
    Compare {
        op: CompareOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
    Bool {
        op: BoolOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
    Not(Box<Expr>),
    Len(Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Stmt {
    Assign(String, Expr),
    If {
        cond: Expr,
        then_block: Vec<Stmt>,
        else_block: Vec<Stmt>,
    },
    Return(Expr),
}

/// A parsed program. Structural equality ignores `source_text`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Program {
    pub statements: Vec<Stmt>,
    pub source_text: String,
}

impl PartialEq for Program {
    fn eq(&self, other: &Self) -> bool {
        self.statements == other.statements
    }
}

impl Program {
    /// Canonical source text for the AST.
    pub fn unparse(&self) -> String {
        let mut out = String::new();
        write_block(&mut out, &self.statements, 0);
        out
    }

    /// Every module call in the program, in source order.
    pub fn calls(&self) -> Vec<ModuleKind> {
        let mut out = Vec::new();
        for s in &self.statements {
            collect_stmt(s, &mut out);
        }
        out
    }
}

fn collect_stmt(s: &Stmt, out: &mut Vec<ModuleKind>) {
    match s {
        Stmt::Assign(_, e) | Stmt::Return(e) => collect_expr(e, out),
        Stmt::If {
            cond,
            then_block,
            else_block,
        } => {
            collect_expr(cond, out);
            for s in then_block.iter().chain(else_block) {
                collect_stmt(s, out);
            }
        }
    }
}

fn collect_expr(e: &Expr, out: &mut Vec<ModuleKind>) {
    match e {
        Expr::Call { module, receiver, args } => {
            collect_expr(receiver, out);
            for a in args {
                collect_expr(a, out);
            }
            out.push(*module);
        }
        Expr::Var(_) | Expr::Literal(_) => {}
        Expr::Index(inner, _) | Expr::Not(inner) | Expr::Len(inner) => collect_expr(inner, out),
        Expr::List(items) => items.iter().for_each(|i| collect_expr(i, out)),
        Expr::Compare { lhs, rhs, .. } | Expr::Bool { lhs, rhs, .. } => {
            collect_expr(lhs, out);
            collect_expr(rhs, out);
        }
    }
}

fn write_block(out: &mut String, block: &[Stmt], depth: usize) {
    let pad = "    ".repeat(depth);
    for s in block {
        match s {
            Stmt::Assign(name, e) => {
                let _ = writeln!(out, "{pad}{name} = {e}");
            }
            Stmt::Return(e) => {
                let _ = writeln!(out, "{pad}return {e}");
            }
            Stmt::If {
                cond,
                then_block,
                else_block,
            } => {
                let _ = writeln!(out, "{pad}if {cond}:");
                write_block(out, then_block, depth + 1);
                if !else_block.is_empty() {
                    let _ = writeln!(out, "{pad}else:");
                    write_block(out, else_block, depth + 1);
                }
            }
        }
    }
}

/// Quotes a string as a double-quoted DSL literal.
pub fn quote(s: &str) -> String {
    let mut q = String::with_capacity(s.len() + 2);
    q.push('"');
    for c in s.chars() {
        match c {
            '"' => q.push_str("\\\""),
            '\\' => q.push_str("\\\\"),
            '\n' => q.push_str("\\n"),
            '\t' => q.push_str("\\t"),
            c => q.push(c),
        }
    }
    q.push('"');
    q
}

impl Expr {
    /// Binding strength; higher binds tighter.
    fn precedence(&self) -> u8 {
        match self {
            Expr::Bool { op: BoolOp::Or, .. } => 1,
            Expr::Bool { op: BoolOp::And, .. } => 2,
            Expr::Not(_) => 3,
            Expr::Compare { .. } => 4,
            _ => 5,
        }
    }

    /// A number before `.` or `[` would lex as part of the number.
    fn fmt_receiver(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Literal(Literal::Num(n)) => write!(f, "({n})"),
            _ => self.fmt_at(f, 5),
        }
    }

    fn fmt_at(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        if self.precedence() < min {
            write!(f, "(")?;
            self.fmt_at(f, 0)?;
            return write!(f, ")");
        }
        match self {
            Expr::Call { module, receiver, args } => {
                receiver.fmt_receiver(f)?;
                write!(f, ".{}(", module.method_name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    a.fmt_at(f, 0)?;
                }
                write!(f, ")")
            }
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Index(inner, i) => {
                inner.fmt_receiver(f)?;
                write!(f, "[{i}]")
            }
            Expr::Literal(Literal::Str(s)) => write!(f, "{}", quote(s)),
            Expr::Literal(Literal::Bool(b)) => write!(f, "{}", if *b { "True" } else { "False" }),
            Expr::Literal(Literal::Num(n)) => write!(f, "{n}"),
            Expr::List(items) => {
                write!(f, "[")?;
                for (i, a) in items.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    a.fmt_at(f, 0)?;
                }
                write!(f, "]")
            }
            Expr::Compare { op, lhs, rhs } => {
                lhs.fmt_at(f, 5)?;
                write!(f, " {} ", if *op == CompareOp::Eq { "==" } else { "!=" })?;
                rhs.fmt_at(f, 5)
            }
            Expr::Bool { op, lhs, rhs } => {
                let p = self.precedence();
                lhs.fmt_at(f, p)?;
                write!(f, " {} ", if *op == BoolOp::And { "and" } else { "or" })?;
                rhs.fmt_at(f, p + 1)
            }
            Expr::Not(inner) => {
                write!(f, "not ")?;
                inner.fmt_at(f, 3)
            }
            Expr::Len(inner) => {
                write!(f, "len(")?;
                inner.fmt_at(f, 0)?;
                write!(f, ")")
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_at(f, 0)
    }
}
