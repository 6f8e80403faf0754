//! A small arithmetic expression language for initial data, e.g.
//! `min(x^2, 4)` or `min(|x|, 2)`.
//!
//! Grammar: numbers, `pi`, variables `x` and `y`, `+ - * / ^`, parentheses,
//! `|e|`, and the functions `abs`, `min`, `max`, `cos`, `sin`, `sqrt`.

use std::fmt;

use thiserror::Error;

use crate::grid::Point;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("expression error at column {column}: {message}")]
pub struct ExprError {
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Const(f64),
    X,
    Y,
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Abs(Box<Node>),
    Min(Vec<Node>),
    Max(Vec<Node>),
    Cos(Box<Node>),
    Sin(Box<Node>),
    Sqrt(Box<Node>),
}

impl Node {
    fn eval(&self, p: Point) -> f64 {
        match self {
            Node::Const(c) => *c,
            Node::X => p[0],
            Node::Y => p[1],
            Node::Neg(a) => -a.eval(p),
            Node::Add(a, b) => a.eval(p) + b.eval(p),
            Node::Sub(a, b) => a.eval(p) - b.eval(p),
            Node::Mul(a, b) => a.eval(p) * b.eval(p),
            Node::Div(a, b) => a.eval(p) / b.eval(p),
            Node::Pow(a, b) => {
                let base = a.eval(p);
                match b.as_ref() {
                    Node::Const(e) if e.fract() == 0.0 && e.abs() < 64.0 => base.powi(*e as i32),
                    other => base.powf(other.eval(p)),
                }
            }
            Node::Abs(a) => a.eval(p).abs(),
            Node::Min(args) => args.iter().map(|a| a.eval(p)).fold(f64::INFINITY, f64::min),
            Node::Max(args) => args.iter().map(|a| a.eval(p)).fold(f64::NEG_INFINITY, f64::max),
            Node::Cos(a) => a.eval(p).cos(),
            Node::Sin(a) => a.eval(p).sin(),
            Node::Sqrt(a) => a.eval(p).sqrt(),
        }
    }

    fn uses_y(&self) -> bool {
        match self {
            Node::Y => true,
            Node::Const(_) | Node::X => false,
            Node::Neg(a) | Node::Abs(a) | Node::Cos(a) | Node::Sin(a) | Node::Sqrt(a) => a.uses_y(),
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) | Node::Pow(a, b) => {
                a.uses_y() || b.uses_y()
            }
            Node::Min(v) | Node::Max(v) => v.iter().any(Node::uses_y),
        }
    }
}

/// Parsed expression together with its source text.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
}

impl Expr {
    pub fn parse(source: &str) -> Result<Self, ExprError> {
        let tokens = tokenize(source)?;
        let mut parser = Parser { tokens, pos: 0 };
        let root = parser.expr()?;
        if let Some(t) = parser.peek() {
            return Err(ExprError { column: t.column, message: format!("unexpected `{}`", t.kind) });
        }
        Ok(Self { source: source.to_string(), root })
    }

    pub fn eval(&self, p: Point) -> f64 {
        self.root.eval(p)
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Whether the expression refers to `y`.
    pub fn uses_y(&self) -> bool {
        self.root.uses_y()
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Num(f64),
    Ident(String),
    Op(char),
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kind::Num(v) => write!(f, "{v}"),
            Kind::Ident(s) => f.write_str(s),
            Kind::Op(c) => write!(f, "{c}"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: Kind,
    column: usize,
}

fn tokenize(src: &str) -> Result<Vec<Token>, ExprError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let column = i + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v = text.parse::<f64>().map_err(|_| ExprError { column, message: format!("bad number `{text}`") })?;
            out.push(Token { kind: Kind::Num(v), column });
        } else if c.is_ascii_alphabetic() {
            let start = i;
            while i < chars.len() && chars[i].is_ascii_alphanumeric() {
                i += 1;
            }
            out.push(Token { kind: Kind::Ident(chars[start..i].iter().collect()), column });
        } else if "+-*/^(),|".contains(c) {
            out.push(Token { kind: Kind::Op(c), column });
            i += 1;
        } else {
            return Err(ExprError { column, message: format!("unexpected character `{c}`") });
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

    fn end_column(&self) -> usize {
        self.tokens.last().map_or(1, |t| t.column + 1)
    }

    fn eat_op(&mut self, op: char) -> bool {
        if matches!(self.peek(), Some(Token { kind: Kind::Op(c), .. }) if *c == op) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_op(&mut self, op: char) -> Result<(), ExprError> {
        if self.eat_op(op) {
            Ok(())
        } else {
            let column = self.peek().map_or(self.end_column(), |t| t.column);
            Err(ExprError { column, message: format!("expected `{op}`") })
        }
    }

    fn expr(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat_op('+') {
                lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat_op('-') {
                lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat_op('*') {
                lhs = Node::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat_op('/') {
                lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        if self.eat_op('-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if self.eat_op('+') {
            return self.unary();
        }
        let base = self.atom()?;
        if self.eat_op('^') {
            return Ok(Node::Pow(Box::new(base), Box::new(self.unary()?)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        let Some(tok) = self.peek().cloned() else {
            return Err(ExprError { column: self.end_column(), message: "unexpected end of expression".into() });
        };
        self.pos += 1;
        match tok.kind {
            Kind::Num(v) => Ok(Node::Const(v)),
            Kind::Op('(') => {
                let e = self.expr()?;
                self.expect_op(')')?;
                Ok(e)
            }
            Kind::Op('|') => {
                let e = self.expr()?;
                self.expect_op('|')?;
                Ok(Node::Abs(Box::new(e)))
            }
            Kind::Ident(name) => match name.as_str() {
                "x" => Ok(Node::X),
                "y" => Ok(Node::Y),
                "pi" => Ok(Node::Const(std::f64::consts::PI)),
                "abs" | "cos" | "sin" | "sqrt" | "min" | "max" => {
                    self.expect_op('(')?;
                    let mut args = vec![self.expr()?];
                    while self.eat_op(',') {
                        args.push(self.expr()?);
                    }
                    self.expect_op(')')?;
                    let unary = |args: Vec<Node>| -> Result<Box<Node>, ExprError> {
                        if args.len() != 1 {
                            return Err(ExprError {
                                column: tok.column,
                                message: format!("`{name}` takes one argument"),
                            });
                        }
                        Ok(Box::new(args.into_iter().next().unwrap()))
                    };
                    match name.as_str() {
                        "abs" => Ok(Node::Abs(unary(args)?)),
                        "cos" => Ok(Node::Cos(unary(args)?)),
                        "sin" => Ok(Node::Sin(unary(args)?)),
                        "sqrt" => Ok(Node::Sqrt(unary(args)?)),
                        _ if args.len() < 2 => Err(ExprError {
                            column: tok.column,
                            message: format!("`{name}` needs at least two arguments"),
                        }),
                        "min" => Ok(Node::Min(args)),
                        _ => Ok(Node::Max(args)),
                    }
                }
                other => Err(ExprError { column: tok.column, message: format!("unknown name `{other}`") }),
            },
            Kind::Op(c) => Err(ExprError { column: tok.column, message: format!("unexpected `{c}`") }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(s: &str, x: f64) -> f64 {
        Expr::parse(s).unwrap().eval([x, 0.0])
    }

    #[test]
    fn reference_data() {
        assert_eq!(ev("min(x^2, 4)", 1.5), 2.25);
        assert_eq!(ev("min(x*x, 4)", -3.0), 4.0);
        assert_eq!(ev("min(|x|, 2)", -1.25), 1.25);
        assert_eq!(ev("min(abs(x), 2)", 7.0), 2.0);
    }

    #[test]
    fn precedence() {
        assert_eq!(ev("1 + 2 * 3", 0.0), 7.0);
        assert_eq!(ev("-x^2", 3.0), -9.0);
        assert_eq!(ev("2^3^2", 0.0), 512.0);
        assert_eq!(ev("(1 + 2) * 3 - 4 / 2", 0.0), 7.0);
        assert!((ev("0.5*cos(x + pi/2)", 0.0)).abs() < 1e-16);
        assert_eq!(ev("max(x, 1, -2)", 0.5), 1.0);
        assert_eq!(ev("1e-1 * 10", 0.0), 1.0);
    }

    #[test]
    fn two_dimensional() {
        let e = Expr::parse("x*x + 2*y").unwrap();
        assert!(e.uses_y());
        assert_eq!(e.eval([1.0, 2.0]), 5.0);
        assert!(!Expr::parse("cos(x)").unwrap().uses_y());
    }

    #[test]
    fn errors_carry_columns() {
        let e = Expr::parse("min(x, ").unwrap_err();
        assert!(e.column >= 7);
        assert_eq!(Expr::parse("x $ 2").unwrap_err().column, 3);
        assert!(Expr::parse("foo(x)").is_err());
        assert!(Expr::parse("min(x)").is_err());
        assert!(Expr::parse("cos(x, 1)").is_err());
        assert!(Expr::parse("|x").is_err());
    }
}
