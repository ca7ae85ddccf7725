//! Expression sub-language for model configuration.
//!
//! ```text
//! expr    := term (("+" | "-") term)*
//! term    := unary (("*" | "·" | "/") unary)*
//! unary   := ("-" | "+") unary | power
//! power   := primary ("^" unary)?
//! primary := number | "pi" | "t" | "y" digits | func "(" expr ")" | "(" expr ")"
//! func    := "cos" | "sin" | "exp"
//! ```
//!
//! Coordinates are `y1..yn` (1-based, as in the config file); `t` is time and
//! is only meaningful in time-dependent entries such as the reaction offset.

use std::fmt;
use std::sync::Arc;

use crate::error::{KrfError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Cos,
    Sin,
    Exp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Coord(usize),
    Time,
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

/// A parsed expression together with its source text.
#[derive(Clone, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.source)
    }
}

impl Expr {
    pub fn parse(source: &str) -> Result<Expr> {
        let mut p = Parser {
            chars: source.chars().collect(),
            pos: 0,
        };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos < p.chars.len() {
            return Err(p.error(format!("unexpected `{}`", p.chars[p.pos])));
        }
        Ok(Expr {
            source: source.to_string(),
            root,
        })
    }

    pub fn constant(value: f64) -> Expr {
        Expr {
            source: format!("{value}"),
            root: Node::Num(value),
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Highest coordinate index referenced (1-based), 0 if none.
    pub fn max_coordinate(&self) -> usize {
        fn walk(n: &Node) -> usize {
            match n {
                Node::Coord(i) => i + 1,
                Node::Neg(a) | Node::Call(_, a) => walk(a),
                Node::Bin(_, a, b) => walk(a).max(walk(b)),
                _ => 0,
            }
        }
        walk(&self.root)
    }

    pub fn uses_time(&self) -> bool {
        fn walk(n: &Node) -> bool {
            match n {
                Node::Time => true,
                Node::Neg(a) | Node::Call(_, a) => walk(a),
                Node::Bin(_, a, b) => walk(a) || walk(b),
                _ => false,
            }
        }
        walk(&self.root)
    }

    /// Evaluates at coordinates `y` (0-based slice) and time `t`.
    /// Coordinates beyond `y.len()` read as 0.
    pub fn eval(&self, y: &[f64], t: f64) -> f64 {
        fn go(n: &Node, y: &[f64], t: f64) -> f64 {
            match n {
                Node::Num(v) => *v,
                Node::Coord(i) => y.get(*i).cloned().unwrap_or(0.0),
                Node::Time => t,
                Node::Neg(a) => -go(a, y, t),
                Node::Bin(op, a, b) => {
                    let (x, z) = (go(a, y, t), go(b, y, t));
                    match op {
                        BinOp::Add => x + z,
                        BinOp::Sub => x - z,
                        BinOp::Mul => x * z,
                        BinOp::Div => x / z,
                        BinOp::Pow => x.powf(z),
                    }
                }
                Node::Call(f, a) => {
                    let x = go(a, y, t);
                    match f {
                        Func::Cos => x.cos(),
                        Func::Sin => x.sin(),
                        Func::Exp => x.exp(),
                    }
                }
            }
        }
        go(&self.root, y, t)
    }

    /// Wraps the expression as a spatial function of the coordinates.
    pub fn to_spatial(&self) -> SpatialFn {
        let e = self.clone();
        Arc::new(move |y: &[f64]| e.eval(y, 0.0))
    }
}

/// A function of the torus coordinates, shareable across threads.
pub type SpatialFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

struct Parser {
    chars: Vec<char>,
    pos: usize,
}

impl Parser {
    fn error(&self, message: String) -> KrfError {
        KrfError::Parse {
            line: 1,
            column: self.pos + 1,
            message,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.chars.len() && self.chars[self.pos].is_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.chars.get(self.pos).cloned()
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Some(c) = self.peek() {
            let op = match c {
                '+' => BinOp::Add,
                '-' | '−' => BinOp::Sub,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        while let Some(c) = self.peek() {
            let op = match c {
                '*' | '·' => BinOp::Mul,
                '/' => BinOp::Div,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node> {
        match self.peek() {
            Some('-') | Some('−') => {
                self.pos += 1;
                Ok(Node::Neg(Box::new(self.unary()?)))
            }
            Some('+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.primary()?;
        if self.peek() == Some('^') {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Node> {
        let c = match self.peek() {
            Some(c) => c,
            None => return Err(self.error("unexpected end of expression".into())),
        };
        if c == '(' {
            self.pos += 1;
            let inner = self.expr()?;
            if self.peek() != Some(')') {
                return Err(self.error("expected `)`".into()));
            }
            self.pos += 1;
            return Ok(inner);
        }
        if c.is_ascii_digit() || c == '.' {
            return self.number();
        }
        if c.is_ascii_alphabetic() {
            let start = self.pos;
            while self.pos < self.chars.len() && self.chars[self.pos].is_ascii_alphanumeric() {
                self.pos += 1;
            }
            let word: String = self.chars[start..self.pos].iter().collect();
            let func = match word.as_str() {
                "pi" => return Ok(Node::Num(std::f64::consts::PI)),
                "t" => return Ok(Node::Time),
                "cos" => Some(Func::Cos),
                "sin" => Some(Func::Sin),
                "exp" => Some(Func::Exp),
                _ => None,
            };
            if let Some(f) = func {
                if self.peek() != Some('(') {
                    return Err(self.error(format!("expected `(` after `{word}`")));
                }
                self.pos += 1;
                let arg = self.expr()?;
                if self.peek() != Some(')') {
                    return Err(self.error("expected `)`".into()));
                }
                self.pos += 1;
                return Ok(Node::Call(f, Box::new(arg)));
            }
            if let Some(idx) = word.strip_prefix('y').and_then(|d| d.parse::<usize>().ok()) {
                if idx == 0 {
                    self.pos = start;
                    return Err(self.error("coordinates are numbered from y1".into()));
                }
                return Ok(Node::Coord(idx - 1));
            }
            self.pos = start;
            return Err(self.error(format!("unknown symbol `{word}`")));
        }
        Err(self.error(format!("unexpected `{c}`")))
    }

    fn number(&mut self) -> Result<Node> {
        let start = self.pos;
        let n = self.chars.len();
        while self.pos < n && (self.chars[self.pos].is_ascii_digit() || self.chars[self.pos] == '.') {
            self.pos += 1;
        }
        if self.pos < n && (self.chars[self.pos] == 'e' || self.chars[self.pos] == 'E') {
            let save = self.pos;
            self.pos += 1;
            if self.pos < n && (self.chars[self.pos] == '+' || self.chars[self.pos] == '-') {
                self.pos += 1;
            }
            if self.pos < n && self.chars[self.pos].is_ascii_digit() {
                while self.pos < n && self.chars[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                self.pos = save;
            }
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        text.parse::<f64>().map(Node::Num).map_err(|_| {
            self.pos = start;
            self.error(format!("invalid number `{text}`"))
        })
    }
}
