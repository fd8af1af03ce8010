//! Arithmetic expression language for user-supplied coefficients.
//!
//! Grammar (precedence low to high):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := ('-' | '+') unary | power
//! power   := atom ('^' unary)?
//! atom    := NUMBER | IDENT | IDENT '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Functions: `pow(a, b)`, `exp`, `log`, `sqrt`, `abs`, `sin`, `cos`, `tanh`,
//! `min(a, b, ...)`, `max(a, b, ...)`. Constants: `pi`, `e`. Variables are
//! resolved against a caller-supplied name list at parse time, so evaluation
//! is a plain slice lookup.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub struct ExprError {
    /// Byte offset into the expression source.
    pub offset: usize,
    pub message: String,
}

impl fmt::Display for ExprError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (at offset {})", self.message, self.offset)
    }
}

impl std::error::Error for ExprError {}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Pow,
    Exp,
    Log,
    Sqrt,
    Abs,
    Sin,
    Cos,
    Tanh,
    Min,
    Max,
}

impl Func {
    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "pow" => Func::Pow,
            "exp" => Func::Exp,
            "log" | "ln" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tanh" => Func::Tanh,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }

    fn arity_ok(self, n: usize) -> bool {
        match self {
            Func::Pow => n == 2,
            Func::Min | Func::Max => n >= 2,
            _ => n == 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Const(f64),
    Var(usize),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

impl Node {
    fn eval(&self, vars: &[f64]) -> f64 {
        match self {
            Node::Const(c) => *c,
            Node::Var(i) => vars[*i],
            Node::Neg(a) => -a.eval(vars),
            Node::Bin(op, a, b) => {
                let (a, b) = (a.eval(vars), b.eval(vars));
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                    BinOp::Pow => pow(a, b),
                }
            }
            Node::Call(f, args) => match f {
                Func::Pow => pow(args[0].eval(vars), args[1].eval(vars)),
                Func::Exp => args[0].eval(vars).exp(),
                Func::Log => args[0].eval(vars).ln(),
                Func::Sqrt => args[0].eval(vars).sqrt(),
                Func::Abs => args[0].eval(vars).abs(),
                Func::Sin => args[0].eval(vars).sin(),
                Func::Cos => args[0].eval(vars).cos(),
                Func::Tanh => args[0].eval(vars).tanh(),
                Func::Min => args
                    .iter()
                    .map(|a| a.eval(vars))
                    .fold(f64::INFINITY, f64::min),
                Func::Max => args
                    .iter()
                    .map(|a| a.eval(vars))
                    .fold(f64::NEG_INFINITY, f64::max),
            },
        }
    }

    fn uses_var(&self, slot: usize) -> bool {
        match self {
            Node::Const(_) => false,
            Node::Var(i) => *i == slot,
            Node::Neg(a) => a.uses_var(slot),
            Node::Bin(_, a, b) => a.uses_var(slot) || b.uses_var(slot),
            Node::Call(_, args) => args.iter().any(|a| a.uses_var(slot)),
        }
    }
}

// Integer exponents go through powi so that (-2)^2 stays finite.
fn pow(a: f64, b: f64) -> f64 {
    if b.fract() == 0.0 && b.abs() <= i32::MAX as f64 {
        a.powi(b as i32)
    } else {
        a.powf(b)
    }
}

/// A parsed expression bound to a fixed variable layout.
#[derive(Debug, Clone)]
pub struct Expr {
    root: Node,
    source: String,
    vars: Vec<String>,
}

impl Expr {
    /// Parse `source`, resolving identifiers against `vars` (slot order).
    /// `aliases` maps extra names onto existing slots.
    pub fn parse(source: &str, vars: &[&str]) -> Result<Expr, ExprError> {
        Self::parse_with_aliases(source, vars, &[])
    }

    pub fn parse_with_aliases(
        source: &str,
        vars: &[&str],
        aliases: &[(&str, usize)],
    ) -> Result<Expr, ExprError> {
        let tokens = lex(source)?;
        let mut p = Parser {
            tokens: &tokens,
            pos: 0,
            vars,
            aliases,
            end: source.len(),
        };
        let root = p.expr()?;
        if let Some(tok) = p.peek() {
            return Err(ExprError {
                offset: tok.offset,
                message: format!("unexpected `{}`", tok.kind),
            });
        }
        Ok(Expr {
            root,
            source: source.to_string(),
            vars: vars.iter().map(|s| s.to_string()).collect(),
        })
    }

    pub fn eval(&self, vars: &[f64]) -> f64 {
        debug_assert!(vars.len() >= self.vars.len());
        self.root.eval(vars)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn uses(&self, name: &str) -> bool {
        self.vars
            .iter()
            .position(|v| v == name)
            .is_some_and(|slot| self.root.uses_var(slot))
    }

    pub fn is_constant(&self) -> bool {
        (0..self.vars.len()).all(|s| !self.root.uses_var(s))
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum TokKind {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

impl fmt::Display for TokKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokKind::Num(v) => write!(f, "{v}"),
            TokKind::Ident(s) => f.write_str(s),
            TokKind::Op(c) => write!(f, "{c}"),
            TokKind::LParen => f.write_str("("),
            TokKind::RParen => f.write_str(")"),
            TokKind::Comma => f.write_str(","),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokKind,
    offset: usize,
}

fn lex(src: &str) -> Result<Vec<Token>, ExprError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == '.' {
            while i < bytes.len() && ((bytes[i] as char).is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            // exponent part: 1e-3, 2.5E+4
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text = &src[start..i];
            let v: f64 = text.parse().map_err(|_| ExprError {
                offset: start,
                message: format!("malformed number `{text}`"),
            })?;
            out.push(Token {
                kind: TokKind::Num(v),
                offset: start,
            });
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
            {
                i += 1;
            }
            out.push(Token {
                kind: TokKind::Ident(src[start..i].to_string()),
                offset: start,
            });
            continue;
        }
        let kind = match c {
            '+' | '-' | '*' | '/' | '^' => TokKind::Op(c),
            '(' => TokKind::LParen,
            ')' => TokKind::RParen,
            ',' => TokKind::Comma,
            _ => {
                return Err(ExprError {
                    offset: start,
                    message: format!("unexpected character `{c}`"),
                })
            }
        };
        out.push(Token {
            kind,
            offset: start,
        });
        i += 1;
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    vars: &'a [&'a str],
    aliases: &'a [(&'a str, usize)],
    end: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<&'a Token> {
        let t = self.tokens.get(self.pos);
        self.pos += 1;
        t
    }

    fn err_here(&self, message: impl Into<String>) -> ExprError {
        ExprError {
            offset: self.peek().map_or(self.end, |t| t.offset),
            message: message.into(),
        }
    }

    fn eat_op(&mut self, ops: &[char]) -> Option<char> {
        match self.peek() {
            Some(Token {
                kind: TokKind::Op(c),
                ..
            }) if ops.contains(c) => {
                let c = *c;
                self.pos += 1;
                Some(c)
            }
            _ => None,
        }
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        while let Some(op) = self.eat_op(&['+', '-']) {
            let rhs = self.term()?;
            let op = if op == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.eat_op(&['*', '/']) {
            let rhs = self.unary()?;
            let op = if op == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        match self.eat_op(&['-', '+']) {
            Some('-') => Ok(Node::Neg(Box::new(self.unary()?))),
            Some(_) => self.unary(),
            None => self.power(),
        }
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.atom()?;
        if self.eat_op(&['^']).is_some() {
            // right-associative; -x^2 parses as -(x^2) via unary above
            let exp = self.unary()?;
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        let Some(tok) = self.next() else {
            return Err(ExprError {
                offset: self.end,
                message: "unexpected end of expression".into(),
            });
        };
        match &tok.kind {
            TokKind::Num(v) => Ok(Node::Const(*v)),
            TokKind::LParen => {
                let inner = self.expr()?;
                match self.next() {
                    Some(Token {
                        kind: TokKind::RParen,
                        ..
                    }) => Ok(inner),
                    _ => {
                        self.pos -= 1;
                        Err(self.err_here("expected `)`"))
                    }
                }
            }
            TokKind::Ident(name) => {
                let is_call = matches!(
                    self.peek(),
                    Some(Token {
                        kind: TokKind::LParen,
                        ..
                    })
                );
                if is_call {
                    let func = Func::lookup(name).ok_or_else(|| ExprError {
                        offset: tok.offset,
                        message: format!("unknown function `{name}`"),
                    })?;
                    self.pos += 1;
                    let mut args = vec![self.expr()?];
                    loop {
                        match self.next() {
                            Some(Token {
                                kind: TokKind::Comma,
                                ..
                            }) => args.push(self.expr()?),
                            Some(Token {
                                kind: TokKind::RParen,
                                ..
                            }) => break,
                            _ => {
                                self.pos -= 1;
                                return Err(self.err_here("expected `,` or `)`"));
                            }
                        }
                    }
                    if !func.arity_ok(args.len()) {
                        return Err(ExprError {
                            offset: tok.offset,
                            message: format!("wrong number of arguments to `{name}`"),
                        });
                    }
                    return Ok(Node::Call(func, args));
                }
                if let Some(slot) = self.vars.iter().position(|v| v == name) {
                    return Ok(Node::Var(slot));
                }
                if let Some((_, slot)) = self.aliases.iter().find(|(a, _)| a == name) {
                    return Ok(Node::Var(*slot));
                }
                match name.as_str() {
                    "pi" => Ok(Node::Const(std::f64::consts::PI)),
                    "e" => Ok(Node::Const(std::f64::consts::E)),
                    _ => Err(ExprError {
                        offset: tok.offset,
                        message: format!("unknown variable `{name}`"),
                    }),
                }
            }
            other => Err(ExprError {
                offset: tok.offset,
                message: format!("unexpected `{other}`"),
            }),
        }
    }
}

/// 1-based line/column of a byte offset in `text`.
pub fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(offset, |nl| offset - nl - 1) + 1;
    (line, col)
}
