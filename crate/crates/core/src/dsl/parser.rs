use std::collections::BTreeSet;

use super::ast::{BoolOp, CompareOp, Expr, Literal, Program, Stmt};
use super::lexer::{tokenize, Tok, Token};
use super::{ParseError, ParseErrorKind, ROOT_IMAGE};
use crate::registry::ModuleKind;

/// Parses program text, enforcing module arity, define-before-use, and a
/// reachable `return` on every path with no statements after it.
pub fn parse(source: &str) -> Result<Program, ParseError> {
    let tokens = tokenize(source)?;
    let mut p = Parser {
        tokens,
        pos: 0,
        in_if: false,
    };
    let mut defined = BTreeSet::from([ROOT_IMAGE.to_string()]);
    let statements = p.block(&mut defined, true)?;
    if !terminates(&statements) {
        let t = p.peek();
        return Err(ParseError {
            kind: ParseErrorKind::MissingReturn,
            line: t.line,
            col: 1,
            message: "not every execution path returns a value".into(),
        });
    }
    Ok(Program {
        statements,
        source_text: source.to_string(),
    })
}

fn terminates(block: &[Stmt]) -> bool {
    match block.last() {
        Some(Stmt::Return(_)) => true,
        Some(Stmt::If {
            then_block, else_block, ..
        }) => terminates(then_block) && terminates(else_block),
        _ => false,
    }
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    in_if: bool,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos.min(self.tokens.len() - 1)]
    }

    fn next(&mut self) -> Token {
        let t = self.peek().clone();
        if self.pos < self.tokens.len() - 1 {
            self.pos += 1;
        }
        t
    }

    fn err(&self, kind: ParseErrorKind, at: &Token, message: impl Into<String>) -> ParseError {
        ParseError {
            kind,
            line: at.line,
            col: at.col,
            message: message.into(),
        }
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<Token, ParseError> {
        let t = self.next();
        if t.tok == want {
            Ok(t)
        } else {
            Err(self.err(
                ParseErrorKind::Syntactic,
                &t,
                format!("expected {what}, found {}", describe(&t.tok)),
            ))
        }
    }

    /// Parses statements until a dedent (nested) or end of input (top level).
    fn block(&mut self, defined: &mut BTreeSet<String>, top: bool) -> Result<Vec<Stmt>, ParseError> {
        let mut out: Vec<Stmt> = Vec::new();
        loop {
            let t = self.peek().clone();
            match t.tok {
                Tok::Eof if top => break,
                Tok::Dedent if !top => break,
                Tok::Eof | Tok::Dedent => {
                    return Err(self.err(ParseErrorKind::Syntactic, &t, "unexpected end of block"))
                }
                Tok::Newline => {
                    self.next();
                    continue;
                }
                _ => {}
            }
            if terminates(&out) {
                return Err(self.err(
                    ParseErrorKind::UnreachableCode,
                    &t,
                    "statement after a return is unreachable",
                ));
            }
            out.push(self.statement(defined)?);
        }
        Ok(out)
    }

    fn statement(&mut self, defined: &mut BTreeSet<String>) -> Result<Stmt, ParseError> {
        let t = self.next();
        match t.tok {
            Tok::Return => {
                let e = self.expr(defined)?;
                self.end_of_line()?;
                Ok(Stmt::Return(e))
            }
            Tok::If => {
                if self.in_if {
                    return Err(self.err(ParseErrorKind::Syntactic, &t, "nested conditionals are not supported"));
                }
                let cond = self.expr(defined)?;
                self.expect(Tok::Colon, "`:`")?;
                self.expect(Tok::Newline, "end of line")?;
                self.in_if = true;
                let mut then_defined = defined.clone();
                let then_block = self.indented_block(&mut then_defined)?;
                let mut else_defined = defined.clone();
                let else_block = if self.peek().tok == Tok::Else {
                    self.next();
                    self.expect(Tok::Colon, "`:`")?;
                    self.expect(Tok::Newline, "end of line")?;
                    self.indented_block(&mut else_defined)?
                } else {
                    Vec::new()
                };
                self.in_if = false;
                *defined = match (terminates(&then_block), terminates(&else_block)) {
                    (true, _) => else_defined,
                    (false, true) => then_defined,
                    (false, false) => then_defined.intersection(&else_defined).cloned().collect(),
                };
                Ok(Stmt::If {
                    cond,
                    then_block,
                    else_block,
                })
            }
            Tok::Ident(name) => {
                self.expect(Tok::Assign, "`=`")?;
                let e = self.expr(defined)?;
                self.end_of_line()?;
                defined.insert(name.clone());
                Ok(Stmt::Assign(name, e))
            }
            other => {
                let message = format!("expected a statement, found {}", describe(&other));
                Err(ParseError {
                    kind: ParseErrorKind::Syntactic,
                    line: t.line,
                    col: t.col,
                    message,
                })
            }
        }
    }

    fn indented_block(&mut self, defined: &mut BTreeSet<String>) -> Result<Vec<Stmt>, ParseError> {
        self.expect(Tok::Indent, "an indented block")?;
        let block = self.block(defined, false)?;
        self.expect(Tok::Dedent, "end of block")?;
        if block.is_empty() {
            let t = self.peek().clone();
            return Err(self.err(ParseErrorKind::Syntactic, &t, "empty block"));
        }
        Ok(block)
    }

    fn end_of_line(&mut self) -> Result<(), ParseError> {
        match self.peek().tok {
            Tok::Newline => {
                self.next();
                Ok(())
            }
            Tok::Eof | Tok::Dedent => Ok(()),
            _ => {
                let t = self.peek().clone();
                Err(self.err(
                    ParseErrorKind::Syntactic,
                    &t,
                    format!("expected end of line, found {}", describe(&t.tok)),
                ))
            }
        }
    }

    fn expr(&mut self, d: &BTreeSet<String>) -> Result<Expr, ParseError> {
        let mut lhs = self.and_expr(d)?;
        while self.peek().tok == Tok::Or {
            self.next();
            let rhs = self.and_expr(d)?;
            lhs = Expr::Bool {
                op: BoolOp::Or,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn and_expr(&mut self, d: &BTreeSet<String>) -> Result<Expr, ParseError> {
        let mut lhs = self.not_expr(d)?;
        while self.peek().tok == Tok::And {
            self.next();
            let rhs = self.not_expr(d)?;
            lhs = Expr::Bool {
                op: BoolOp::And,
                lhs: Box::new(lhs),
                rhs: Box::new(rhs),
            };
        }
        Ok(lhs)
    }

    fn not_expr(&mut self, d: &BTreeSet<String>) -> Result<Expr, ParseError> {
        if self.peek().tok == Tok::Not {
            self.next();
            return Ok(Expr::Not(Box::new(self.not_expr(d)?)));
        }
        self.comparison(d)
    }

    fn comparison(&mut self, d: &BTreeSet<String>) -> Result<Expr, ParseError> {
        let lhs = self.postfix(d)?;
        let op = match self.peek().tok {
            Tok::EqEq => CompareOp::Eq,
            Tok::NotEq => CompareOp::Ne,
            _ => return Ok(lhs),
        };
        self.next();
        let rhs = self.postfix(d)?;
        Ok(Expr::Compare {
            op,
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
        })
    }

    fn postfix(&mut self, d: &BTreeSet<String>) -> Result<Expr, ParseError> {
        let mut e = self.primary(d)?;
        loop {
            match self.peek().tok {
                Tok::Dot => {
                    self.next();
                    let t = self.next();
                    let Tok::Ident(method) = &t.tok else {
                        return Err(self.err(ParseErrorKind::Syntactic, &t, "expected a module name after `.`"));
                    };
                    let module = ModuleKind::from_method(method).ok_or_else(|| {
                        self.err(ParseErrorKind::UnknownModule, &t, format!("unknown module `{method}`"))
                    })?;
                    self.expect(Tok::LParen, "`(`")?;
                    let args = self.arguments(d, Tok::RParen)?;
                    if args.len() != module.arity() {
                        return Err(self.err(
                            ParseErrorKind::Arity,
                            &t,
                            format!("`{method}` takes {} argument(s), got {}", module.arity(), args.len()),
                        ));
                    }
                    e = Expr::Call {
                        module,
                        receiver: Box::new(e),
                        args,
                    };
                }
                Tok::LBracket => {
                    self.next();
                    let t = self.next();
                    let index = match &t.tok {
                        Tok::Number(n) => n
                            .parse::<i64>()
                            .map_err(|_| self.err(ParseErrorKind::Syntactic, &t, "index must be an integer"))?,
                        _ => return Err(self.err(ParseErrorKind::Syntactic, &t, "index must be an integer literal")),
                    };
                    self.expect(Tok::RBracket, "`]`")?;
                    e = Expr::Index(Box::new(e), index);
                }
                _ => return Ok(e),
            }
        }
    }

    fn arguments(&mut self, d: &BTreeSet<String>, close: Tok) -> Result<Vec<Expr>, ParseError> {
        let mut args = Vec::new();
        if self.peek().tok == close {
            self.next();
            return Ok(args);
        }
        loop {
            args.push(self.expr(d)?);
            let t = self.next();
            if t.tok == close {
                return Ok(args);
            }
            if t.tok != Tok::Comma {
                return Err(self.err(
                    ParseErrorKind::Syntactic,
                    &t,
                    format!("expected `,` or closing bracket, found {}", describe(&t.tok)),
                ));
            }
            if self.peek().tok == close {
                self.next();
                return Ok(args);
            }
        }
    }

    fn primary(&mut self, d: &BTreeSet<String>) -> Result<Expr, ParseError> {
        let t = self.next();
        match &t.tok {
            Tok::Str(s) => Ok(Expr::Literal(Literal::Str(s.clone()))),
            Tok::Number(n) => n
                .parse::<f64>()
                .map(|v| Expr::Literal(Literal::Num(v)))
                .map_err(|_| self.err(ParseErrorKind::Lexical, &t, "malformed number")),
            Tok::True => Ok(Expr::Literal(Literal::Bool(true))),
            Tok::False => Ok(Expr::Literal(Literal::Bool(false))),
            Tok::LBracket => Ok(Expr::List(self.arguments(d, Tok::RBracket)?)),
            Tok::LParen => {
                let e = self.expr(d)?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Tok::Ident(name) if name == "len" && self.peek().tok == Tok::LParen => {
                self.next();
                let e = self.expr(d)?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(Expr::Len(Box::new(e)))
            }
            Tok::Ident(name) => {
                if d.contains(name) {
                    Ok(Expr::Var(name.clone()))
                } else {
                    Err(self.err(
                        ParseErrorKind::UndefinedVariable,
                        &t,
                        format!("variable `{name}` used before definition"),
                    ))
                }
            }
            other => Err(self.err(
                ParseErrorKind::Syntactic,
                &t,
                format!("expected an expression, found {}", describe(other)),
            )),
        }
    }
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Ident(s) => format!("identifier `{s}`"),
        Tok::Str(_) => "string literal".into(),
        Tok::Number(n) => format!("number `{n}`"),
        Tok::Newline => "end of line".into(),
        Tok::Indent => "indentation".into(),
        Tok::Dedent => "dedent".into(),
        Tok::Eof => "end of input".into(),
        other => format!("`{}`", format!("{other:?}").to_lowercase()),
    }
}
