//! The small expression language used by output rules.
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := NUMBER | 'args.' NAME | 'input.' NAME '.' ATTR
//!         | 'len(' 'args.' NAME ')'
//!         | ('sum' | 'max' | 'min') '(' 'inputs.' NAME '.' ATTR ')'
//!         | ('max' | 'min') '(' expr ',' expr ')'
//!         | '(' expr ')'
//! ```
//!
//! `input.p.attr` reads an attribute of the asset bound to an `asset_ref`
//! parameter; `inputs.p.attr` aggregates over an `asset_ref_list` parameter.

use std::collections::HashMap;
use std::fmt;

use serde_json::{Map, Value};

use super::store::{Attr, MediaAsset};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregate {
    Sum,
    Max,
    Min,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Arg(String),
    Len(String),
    Input { param: String, attr: Attr },
    Over { agg: Aggregate, param: String, attr: Attr },
    Bin(Box<Expr>, BinOp, Box<Expr>),
    Max(Box<Expr>, Box<Expr>),
    Min(Box<Expr>, Box<Expr>),
}

/// A reference made by an expression, checked against the tool's params.
#[derive(Debug, Clone, PartialEq)]
pub enum Reference<'a> {
    Arg(&'a str),
    Len(&'a str),
    Input(&'a str, Attr),
    Inputs(&'a str, Attr),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExprError(pub String);

impl fmt::Display for ExprError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Values an expression is evaluated against: arguments with defaults
/// applied, and resolved input assets per parameter.
pub struct EvalContext<'a> {
    pub args: &'a Map<String, Value>,
    pub inputs: &'a HashMap<String, Vec<MediaAsset>>,
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr, ExprError> {
        let tokens = tokenize(src)?;
        let mut p = Parser { tokens, pos: 0 };
        let e = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(ExprError(format!("trailing input in `{src}`")));
        }
        Ok(e)
    }

    pub fn references(&self) -> Vec<Reference<'_>> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out
    }

    fn collect<'a>(&'a self, out: &mut Vec<Reference<'a>>) {
        match self {
            Expr::Const(_) => {}
            Expr::Arg(a) => out.push(Reference::Arg(a)),
            Expr::Len(a) => out.push(Reference::Len(a)),
            Expr::Input { param, attr } => out.push(Reference::Input(param, *attr)),
            Expr::Over { param, attr, .. } => out.push(Reference::Inputs(param, *attr)),
            Expr::Bin(l, _, r) | Expr::Max(l, r) | Expr::Min(l, r) => {
                l.collect(out);
                r.collect(out);
            }
        }
    }

    pub fn eval(&self, ctx: &EvalContext<'_>) -> Result<f64, ExprError> {
        Ok(match self {
            Expr::Const(c) => *c,
            Expr::Arg(name) => match ctx.args.get(name) {
                Some(Value::Number(n)) => n.as_f64().unwrap_or(f64::NAN),
                Some(Value::Bool(b)) => f64::from(u8::from(*b)),
                Some(other) => return Err(ExprError(format!("args.{name} is not numeric: {other}"))),
                None => return Err(ExprError(format!("args.{name} is not set"))),
            },
            Expr::Len(name) => match ctx.args.get(name) {
                Some(Value::String(s)) => s.chars().count() as f64,
                _ => return Err(ExprError(format!("args.{name} is not a string"))),
            },
            Expr::Input { param, attr } => {
                let asset = ctx
                    .inputs
                    .get(param)
                    .and_then(|v| v.first())
                    .ok_or_else(|| ExprError(format!("input.{param} is not bound")))?;
                asset
                    .attribute(*attr)
                    .ok_or_else(|| ExprError(format!("input.{param} has no {attr}")))?
            }
            Expr::Over { agg, param, attr } => {
                let assets = ctx
                    .inputs
                    .get(param)
                    .ok_or_else(|| ExprError(format!("inputs.{param} is not bound")))?;
                let mut values = Vec::with_capacity(assets.len());
                for a in assets {
                    values.push(
                        a.attribute(*attr)
                            .ok_or_else(|| ExprError(format!("{} has no {attr}", a.id)))?,
                    );
                }
                if values.is_empty() {
                    return Err(ExprError(format!("inputs.{param} is empty")));
                }
                match agg {
                    Aggregate::Sum => values.iter().sum(),
                    Aggregate::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    Aggregate::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
                }
            }
            Expr::Bin(l, op, r) => {
                let (a, b) = (l.eval(ctx)?, r.eval(ctx)?);
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                }
            }
            Expr::Max(l, r) => l.eval(ctx)?.max(r.eval(ctx)?),
            Expr::Min(l, r) => l.eval(ctx)?.min(r.eval(ctx)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Dot,
    Comma,
    LParen,
    RParen,
    Op(char),
}

fn tokenize(src: &str) -> Result<Vec<Token>, ExprError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            ' ' | '\t' => i += 1,
            '.' if !chars.get(i + 1).is_some_and(char::is_ascii_digit) => {
                out.push(Token::Dot);
                i += 1;
            }
            ',' => {
                out.push(Token::Comma);
                i += 1;
            }
            '(' => {
                out.push(Token::LParen);
                i += 1;
            }
            ')' => {
                out.push(Token::RParen);
                i += 1;
            }
            '+' | '-' | '*' | '/' => {
                out.push(Token::Op(c));
                i += 1;
            }
            c if c.is_ascii_digit() || c == '.' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                    i += 1;
                }
                let text: String = chars[start..i].iter().collect();
                let n = text
                    .parse::<f64>()
                    .map_err(|_| ExprError(format!("bad number `{text}`")))?;
                out.push(Token::Num(n));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push(Token::Ident(chars[start..i].iter().collect()));
            }
            other => return Err(ExprError(format!("unexpected character `{other}`"))),
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: Token) -> Result<(), ExprError> {
        match self.next() {
            Some(t) if t == want => Ok(()),
            other => Err(ExprError(format!("expected {want:?}, found {other:?}"))),
        }
    }

    fn ident(&mut self) -> Result<String, ExprError> {
        match self.next() {
            Some(Token::Ident(s)) => Ok(s),
            other => Err(ExprError(format!("expected a name, found {other:?}"))),
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        while let Some(Token::Op(c @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let op = if c == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Expr::Bin(Box::new(lhs), op, Box::new(self.term()?));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.factor()?;
        while let Some(Token::Op(c @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let op = if c == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Expr::Bin(Box::new(lhs), op, Box::new(self.factor()?));
        }
        Ok(lhs)
    }

    fn attr(&mut self) -> Result<Attr, ExprError> {
        let name = self.ident()?;
        Attr::from_name(&name).ok_or_else(|| ExprError(format!("unknown attribute `{name}`")))
    }

    /// `NAME '.' NAME` after a namespace.
    fn path(&mut self) -> Result<(String, Attr), ExprError> {
        self.expect(Token::Dot)?;
        let param = self.ident()?;
        self.expect(Token::Dot)?;
        Ok((param, self.attr()?))
    }

    fn factor(&mut self) -> Result<Expr, ExprError> {
        match self.next() {
            Some(Token::Num(n)) => Ok(Expr::Const(n)),
            Some(Token::LParen) => {
                let e = self.expr()?;
                self.expect(Token::RParen)?;
                Ok(e)
            }
            Some(Token::Ident(id)) => match id.as_str() {
                "args" => {
                    self.expect(Token::Dot)?;
                    Ok(Expr::Arg(self.ident()?))
                }
                "input" => {
                    let (param, attr) = self.path()?;
                    Ok(Expr::Input { param, attr })
                }
                "len" => {
                    self.expect(Token::LParen)?;
                    if self.ident()? != "args" {
                        return Err(ExprError("len() takes an args reference".into()));
                    }
                    self.expect(Token::Dot)?;
                    let name = self.ident()?;
                    self.expect(Token::RParen)?;
                    Ok(Expr::Len(name))
                }
                "sum" | "max" | "min" => {
                    self.expect(Token::LParen)?;
                    if self.peek() == Some(&Token::Ident("inputs".into())) {
                        self.pos += 1;
                        let (param, attr) = self.path()?;
                        self.expect(Token::RParen)?;
                        let agg = match id.as_str() {
                            "sum" => Aggregate::Sum,
                            "max" => Aggregate::Max,
                            _ => Aggregate::Min,
                        };
                        return Ok(Expr::Over { agg, param, attr });
                    }
                    if id == "sum" {
                        return Err(ExprError("sum() takes an inputs reference".into()));
                    }
                    let a = self.expr()?;
                    self.expect(Token::Comma)?;
                    let b = self.expr()?;
                    self.expect(Token::RParen)?;
                    Ok(if id == "max" {
                        Expr::Max(Box::new(a), Box::new(b))
                    } else {
                        Expr::Min(Box::new(a), Box::new(b))
                    })
                }
                other => Err(ExprError(format!("unknown name `{other}`"))),
            },
            other => Err(ExprError(format!("unexpected token {other:?}"))),
        }
    }
}
