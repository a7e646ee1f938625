//! Symbolic expressions over coordinates x1..xn.
//!
//! Small immutable tree with structural sharing (`Arc`). Construction goes
//! through smart constructors that fold constants and strip 0/1 identities;
//! this keeps derivative trees from exploding and lets zero coefficients
//! short-circuit entire branches.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use thiserror::Error;

/// Smooth scalar functions admitted by the grammar.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Fun {
    Exp,
    Log,
    Sin,
    Cos,
    Tan,
    Cot,
    Tanh,
    Sqrt,
}

impl Fun {
    fn name(self) -> &'static str {
        match self {
            Fun::Exp => "exp",
            Fun::Log => "log",
            Fun::Sin => "sin",
            Fun::Cos => "cos",
            Fun::Tan => "tan",
            Fun::Cot => "cot",
            Fun::Tanh => "tanh",
            Fun::Sqrt => "sqrt",
        }
    }

    fn from_name(s: &str) -> Option<Fun> {
        Some(match s {
            "exp" => Fun::Exp,
            "log" => Fun::Log,
            "sin" => Fun::Sin,
            "cos" => Fun::Cos,
            "tan" => Fun::Tan,
            "cot" => Fun::Cot,
            "tanh" => Fun::Tanh,
            "sqrt" => Fun::Sqrt,
            _ => return None,
        })
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Fun::Exp => v.exp(),
            Fun::Log => v.ln(),
            Fun::Sin => v.sin(),
            Fun::Cos => v.cos(),
            Fun::Tan => v.tan(),
            Fun::Cot => v.tan().recip(),
            Fun::Tanh => v.tanh(),
            Fun::Sqrt => v.sqrt(),
        }
    }
}

#[derive(PartialEq, Debug)]
enum Node {
    Const(f64),
    /// 1-based coordinate index (x1, x2, ...).
    Var(usize),
    Add(Expr, Expr),
    Sub(Expr, Expr),
    Mul(Expr, Expr),
    Div(Expr, Expr),
    Pow(Expr, Expr),
    Neg(Expr),
    Fun(Fun, Expr),
}

/// Immutable expression tree; cheap to clone.
#[derive(Clone, PartialEq)]
pub struct Expr(Arc<Node>);

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({self})")
    }
}

impl Expr {
    pub fn num(c: f64) -> Expr {
        Expr(Arc::new(Node::Const(c)))
    }

    /// Coordinate x_i, 1-based.
    pub fn var(i: usize) -> Expr {
        assert!(i >= 1, "variable indices are 1-based");
        Expr(Arc::new(Node::Var(i)))
    }

    pub fn zero() -> Expr {
        Expr::num(0.0)
    }

    pub fn one() -> Expr {
        Expr::num(1.0)
    }

    pub fn as_const(&self) -> Option<f64> {
        match *self.0 {
            Node::Const(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    pub fn is_one(&self) -> bool {
        self.as_const() == Some(1.0)
    }

    pub fn add(a: &Expr, b: &Expr) -> Expr {
        if a.is_zero() {
            return b.clone();
        }
        if b.is_zero() {
            return a.clone();
        }
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            if (x + y).is_finite() {
                return Expr::num(x + y);
            }
        }
        Expr(Arc::new(Node::Add(a.clone(), b.clone())))
    }

    pub fn sub(a: &Expr, b: &Expr) -> Expr {
        if b.is_zero() {
            return a.clone();
        }
        if a.is_zero() {
            return Expr::neg(b);
        }
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            if (x - y).is_finite() {
                return Expr::num(x - y);
            }
        }
        Expr(Arc::new(Node::Sub(a.clone(), b.clone())))
    }

    pub fn mul(a: &Expr, b: &Expr) -> Expr {
        if a.is_zero() || b.is_zero() {
            return Expr::zero();
        }
        if a.is_one() {
            return b.clone();
        }
        if b.is_one() {
            return a.clone();
        }
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            if (x * y).is_finite() {
                return Expr::num(x * y);
            }
        }
        // c1 * (c2 * e) -> (c1*c2) * e, so repeated constant factors collapse.
        if let Some(x) = a.as_const() {
            if let Node::Mul(ref l, ref r) = *b.0 {
                if let Some(y) = l.as_const() {
                    if (x * y).is_finite() {
                        return Expr::mul(&Expr::num(x * y), r);
                    }
                }
            }
            if x == -1.0 {
                return Expr::neg(b);
            }
        }
        if b.as_const() == Some(-1.0) {
            return Expr::neg(a);
        }
        Expr(Arc::new(Node::Mul(a.clone(), b.clone())))
    }

    pub fn div(a: &Expr, b: &Expr) -> Expr {
        if a.is_zero() && !b.is_zero() {
            return Expr::zero();
        }
        if b.is_one() {
            return a.clone();
        }
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            if y != 0.0 && (x / y).is_finite() {
                return Expr::num(x / y);
            }
        }
        Expr(Arc::new(Node::Div(a.clone(), b.clone())))
    }

    pub fn neg(a: &Expr) -> Expr {
        if let Some(x) = a.as_const() {
            return Expr::num(-x);
        }
        if let Node::Neg(ref inner) = *a.0 {
            return inner.clone();
        }
        Expr(Arc::new(Node::Neg(a.clone())))
    }

    pub fn pow(base: &Expr, exponent: &Expr) -> Expr {
        if let Some(e) = exponent.as_const() {
            if e == 0.0 {
                return Expr::one();
            }
            if e == 1.0 {
                return base.clone();
            }
            if let Some(b) = base.as_const() {
                let v = b.powf(e);
                if v.is_finite() {
                    return Expr::num(v);
                }
            }
        }
        if base.is_one() {
            return Expr::one();
        }
        Expr(Arc::new(Node::Pow(base.clone(), exponent.clone())))
    }

    pub fn powi(base: &Expr, k: i32) -> Expr {
        Expr::pow(base, &Expr::num(f64::from(k)))
    }

    pub fn fun(f: Fun, arg: &Expr) -> Expr {
        if let Some(v) = arg.as_const() {
            let r = f.apply(v);
            if r.is_finite() {
                return Expr::num(r);
            }
        }
        Expr(Arc::new(Node::Fun(f, arg.clone())))
    }

    pub fn exp(arg: &Expr) -> Expr {
        Expr::fun(Fun::Exp, arg)
    }

    pub fn log(arg: &Expr) -> Expr {
        Expr::fun(Fun::Log, arg)
    }

    pub fn sqrt(arg: &Expr) -> Expr {
        Expr::fun(Fun::Sqrt, arg)
    }

    /// Balanced sum; keeps tree depth logarithmic in the number of terms.
    pub fn sum<I: IntoIterator<Item = Expr>>(terms: I) -> Expr {
        let mut layer: Vec<Expr> = terms.into_iter().filter(|t| !t.is_zero()).collect();
        if layer.is_empty() {
            return Expr::zero();
        }
        while layer.len() > 1 {
            let mut next = Vec::with_capacity(layer.len().div_ceil(2));
            let mut it = layer.into_iter();
            while let Some(a) = it.next() {
                match it.next() {
                    Some(b) => next.push(Expr::add(&a, &b)),
                    None => next.push(a),
                }
            }
            layer = next;
        }
        layer.pop().unwrap()
    }

    /// Partial derivative with respect to x_i (1-based).
    pub fn diff(&self, i: usize) -> Expr {
        match *self.0 {
            Node::Const(_) => Expr::zero(),
            Node::Var(j) => {
                if i == j {
                    Expr::one()
                } else {
                    Expr::zero()
                }
            }
            Node::Add(ref a, ref b) => Expr::add(&a.diff(i), &b.diff(i)),
            Node::Sub(ref a, ref b) => Expr::sub(&a.diff(i), &b.diff(i)),
            Node::Mul(ref a, ref b) => {
                Expr::add(&Expr::mul(&a.diff(i), b), &Expr::mul(a, &b.diff(i)))
            }
            Node::Div(ref a, ref b) => {
                let num = Expr::sub(&Expr::mul(&a.diff(i), b), &Expr::mul(a, &b.diff(i)));
                Expr::div(&num, &Expr::powi(b, 2))
            }
            Node::Pow(ref base, ref exponent) => {
                if let Some(k) = exponent.as_const() {
                    // d/dx b^k = k b^(k-1) b'
                    let t = Expr::mul(&Expr::num(k), &Expr::pow(base, &Expr::num(k - 1.0)));
                    Expr::mul(&t, &base.diff(i))
                } else {
                    // b^e (e' log b + e b'/b)
                    let t1 = Expr::mul(&exponent.diff(i), &Expr::log(base));
                    let t2 = Expr::mul(exponent, &Expr::div(&base.diff(i), base));
                    Expr::mul(self, &Expr::add(&t1, &t2))
                }
            }
            Node::Neg(ref a) => Expr::neg(&a.diff(i)),
            Node::Fun(f, ref u) => {
                let outer = match f {
                    Fun::Exp => Expr::exp(u),
                    Fun::Log => Expr::div(&Expr::one(), u),
                    Fun::Sin => Expr::fun(Fun::Cos, u),
                    Fun::Cos => Expr::neg(&Expr::fun(Fun::Sin, u)),
                    Fun::Tan => {
                        Expr::add(&Expr::one(), &Expr::powi(&Expr::fun(Fun::Tan, u), 2))
                    }
                    Fun::Cot => Expr::neg(&Expr::add(
                        &Expr::one(),
                        &Expr::powi(&Expr::fun(Fun::Cot, u), 2),
                    )),
                    Fun::Tanh => {
                        Expr::sub(&Expr::one(), &Expr::powi(&Expr::fun(Fun::Tanh, u), 2))
                    }
                    Fun::Sqrt => {
                        Expr::div(&Expr::one(), &Expr::mul(&Expr::num(2.0), &Expr::sqrt(u)))
                    }
                };
                Expr::mul(&outer, &u.diff(i))
            }
        }
    }

    /// Evaluate at a point. Domain failures report the offending subexpression
    /// and the point.
    pub fn eval(&self, x: &[f64]) -> Result<f64, EvalError> {
        self.eval_node(x).map_err(|kind| EvalError {
            expr: kind.1.to_string(),
            point: x.to_vec(),
            kind: kind.0,
        })
    }

    fn eval_node<'a>(&'a self, x: &[f64]) -> Result<f64, (EvalErrorKind, &'a Expr)> {
        let finite = |v: f64, at: &'a Expr| {
            if v.is_finite() {
                Ok(v)
            } else {
                Err((EvalErrorKind::NonFinite, at))
            }
        };
        match *self.0 {
            Node::Const(c) => finite(c, self),
            Node::Var(j) => x
                .get(j - 1)
                .copied()
                .ok_or((EvalErrorKind::VarOutOfRange { index: j, dim: x.len() }, self)),
            Node::Add(ref a, ref b) => finite(a.eval_node(x)? + b.eval_node(x)?, self),
            Node::Sub(ref a, ref b) => finite(a.eval_node(x)? - b.eval_node(x)?, self),
            Node::Mul(ref a, ref b) => finite(a.eval_node(x)? * b.eval_node(x)?, self),
            Node::Div(ref a, ref b) => {
                let d = b.eval_node(x)?;
                if d == 0.0 {
                    return Err((EvalErrorKind::DivisionByZero, self));
                }
                finite(a.eval_node(x)? / d, self)
            }
            Node::Pow(ref base, ref exponent) => {
                let b = base.eval_node(x)?;
                let e = exponent.eval_node(x)?;
                let v = b.powf(e);
                if v.is_nan() {
                    return Err((EvalErrorKind::PowDomain { base: b, exponent: e }, self));
                }
                finite(v, self)
            }
            Node::Neg(ref a) => finite(-a.eval_node(x)?, self),
            Node::Fun(f, ref u) => {
                let v = u.eval_node(x)?;
                match f {
                    Fun::Log if v <= 0.0 => {
                        return Err((EvalErrorKind::LogNonPositive(v), self))
                    }
                    Fun::Sqrt if v < 0.0 => {
                        return Err((EvalErrorKind::SqrtNegative(v), self))
                    }
                    Fun::Cot if v.tan() == 0.0 => {
                        return Err((EvalErrorKind::DivisionByZero, self))
                    }
                    _ => {}
                }
                finite(f.apply(v), self)
            }
        }
    }

    fn precedence(&self) -> u8 {
        match *self.0 {
            Node::Add(..) | Node::Sub(..) => 1,
            Node::Mul(..) | Node::Div(..) => 2,
            Node::Neg(..) => 3,
            Node::Pow(..) => 4,
            Node::Const(c) if c < 0.0 => 3,
            Node::Const(..) | Node::Var(..) | Node::Fun(..) => 5,
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, min: u8) -> fmt::Result {
        let p = self.precedence();
        if p < min {
            write!(f, "(")?;
        }
        match *self.0 {
            Node::Const(c) => {
                if c == c.trunc() && c.abs() < 1e15 {
                    write!(f, "{}", c as i64)?;
                } else {
                    write!(f, "{c}")?;
                }
            }
            Node::Var(j) => write!(f, "x{j}")?,
            Node::Add(ref a, ref b) => {
                a.fmt_prec(f, 1)?;
                write!(f, " + ")?;
                b.fmt_prec(f, 2)?;
            }
            Node::Sub(ref a, ref b) => {
                a.fmt_prec(f, 1)?;
                write!(f, " - ")?;
                b.fmt_prec(f, 2)?;
            }
            Node::Mul(ref a, ref b) => {
                a.fmt_prec(f, 2)?;
                write!(f, "*")?;
                b.fmt_prec(f, 3)?;
            }
            Node::Div(ref a, ref b) => {
                a.fmt_prec(f, 2)?;
                write!(f, "/")?;
                b.fmt_prec(f, 5)?;
            }
            Node::Neg(ref a) => {
                write!(f, "-")?;
                a.fmt_prec(f, 3)?;
            }
            Node::Pow(ref a, ref b) => {
                a.fmt_prec(f, 5)?;
                write!(f, "^")?;
                b.fmt_prec(f, 5)?;
            }
            Node::Fun(fun, ref a) => {
                write!(f, "{}(", fun.name())?;
                a.fmt_prec(f, 0)?;
                write!(f, ")")?;
            }
        }
        if p < min {
            write!(f, ")")?;
        }
        Ok(())
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalErrorKind {
    VarOutOfRange { index: usize, dim: usize },
    DivisionByZero,
    LogNonPositive(f64),
    SqrtNegative(f64),
    PowDomain { base: f64, exponent: f64 },
    NonFinite,
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("cannot evaluate `{expr}` at {point:?}: {kind:?}")]
pub struct EvalError {
    pub expr: String,
    pub point: Vec<f64>,
    pub kind: EvalErrorKind,
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("parse error at byte {pos}: {message}")]
pub struct ParseError {
    pub pos: usize,
    pub message: String,
}

// ── parser ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn tokens(mut self) -> Result<Vec<(Tok, usize)>, ParseError> {
        let mut out = Vec::new();
        while self.pos < self.src.len() {
            let start = self.pos;
            let c = self.src[self.pos];
            match c {
                b' ' | b'\t' | b'\n' | b'\r' => {
                    self.pos += 1;
                }
                b'+' => {
                    out.push((Tok::Plus, start));
                    self.pos += 1;
                }
                b'-' => {
                    out.push((Tok::Minus, start));
                    self.pos += 1;
                }
                b'*' => {
                    out.push((Tok::Star, start));
                    self.pos += 1;
                }
                b'/' => {
                    out.push((Tok::Slash, start));
                    self.pos += 1;
                }
                b'^' => {
                    out.push((Tok::Caret, start));
                    self.pos += 1;
                }
                b'(' => {
                    out.push((Tok::LParen, start));
                    self.pos += 1;
                }
                b')' => {
                    out.push((Tok::RParen, start));
                    self.pos += 1;
                }
                b'0'..=b'9' => {
                    out.push((self.number(start)?, start));
                }
                b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                    while self.pos < self.src.len()
                        && (self.src[self.pos].is_ascii_alphanumeric()
                            || self.src[self.pos] == b'_')
                    {
                        self.pos += 1;
                    }
                    let name = std::str::from_utf8(&self.src[start..self.pos])
                        .unwrap()
                        .to_string();
                    out.push((Tok::Ident(name), start));
                }
                _ => {
                    return Err(ParseError {
                        pos: start,
                        message: format!("unexpected character `{}`", c as char),
                    })
                }
            }
        }
        Ok(out)
    }

    fn number(&mut self, start: usize) -> Result<Tok, ParseError> {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos < self.src.len() && self.src[self.pos] == b'.' {
            self.pos += 1;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
        }
        if self.pos < self.src.len() && (self.src[self.pos] | 0x20) == b'e' {
            let mark = self.pos;
            self.pos += 1;
            if self.pos < self.src.len() && (self.src[self.pos] == b'+' || self.src[self.pos] == b'-')
            {
                self.pos += 1;
            }
            if self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                    self.pos += 1;
                }
            } else {
                // not an exponent after all (e.g. `2*exp(x1)` tokenizes `2` then `*`)
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        let v = f64::from_str(text).map_err(|_| ParseError {
            pos: start,
            message: format!("invalid numeric literal `{text}`"),
        })?;
        if !v.is_finite() {
            return Err(ParseError {
                pos: start,
                message: format!("numeric literal `{text}` out of range"),
            });
        }
        Ok(Tok::Num(v))
    }
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    i: usize,
    dim: usize,
    end: usize,
}

const NON_SMOOTH: &[&str] = &["abs", "max", "min", "sign", "floor", "ceil", "step", "heaviside"];

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.i).map(|(t, _)| t)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.i).map(|&(_, p)| p).unwrap_or(self.end)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.i).map(|(t, _)| t.clone());
        if t.is_some() {
            self.i += 1;
        }
        t
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), ParseError> {
        if self.peek() == Some(&want) {
            self.i += 1;
            Ok(())
        } else {
            Err(ParseError {
                pos: self.pos(),
                message: format!("expected {what}"),
            })
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.i += 1;
                    let rhs = self.term()?;
                    lhs = Expr::add(&lhs, &rhs);
                }
                Some(Tok::Minus) => {
                    self.i += 1;
                    let rhs = self.term()?;
                    lhs = Expr::sub(&lhs, &rhs);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.i += 1;
                    let rhs = self.unary()?;
                    lhs = Expr::mul(&lhs, &rhs);
                }
                Some(Tok::Slash) => {
                    self.i += 1;
                    let rhs = self.unary()?;
                    lhs = Expr::div(&lhs, &rhs);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.peek() == Some(&Tok::Minus) {
            self.i += 1;
            let inner = self.unary()?;
            return Ok(Expr::neg(&inner));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if self.peek() == Some(&Tok::Caret) {
            self.i += 1;
            // right-associative; exponent may carry a unary minus
            let exponent = self.unary()?;
            return Ok(Expr::pow(&base, &exponent));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let pos = self.pos();
        match self.bump() {
            Some(Tok::Num(v)) => Ok(Expr::num(v)),
            Some(Tok::LParen) => {
                let inner = self.expr()?;
                self.expect(Tok::RParen, "closing `)`")?;
                Ok(inner)
            }
            Some(Tok::Ident(name)) => self.ident(name, pos),
            Some(tok) => Err(ParseError {
                pos,
                message: format!("unexpected token `{tok:?}`"),
            }),
            None => Err(ParseError {
                pos,
                message: "unexpected end of input".into(),
            }),
        }
    }

    fn ident(&mut self, name: String, pos: usize) -> Result<Expr, ParseError> {
        // variable pattern: x followed by digits only
        if let Some(rest) = name.strip_prefix('x') {
            if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
                let idx: usize = rest.parse().map_err(|_| ParseError {
                    pos,
                    message: format!("variable index in `{name}` out of range"),
                })?;
                if idx == 0 || idx > self.dim {
                    return Err(ParseError {
                        pos,
                        message: format!(
                            "variable `{name}` out of range for dimension {}",
                            self.dim
                        ),
                    });
                }
                return Ok(Expr::var(idx));
            }
        }
        if self.peek() == Some(&Tok::LParen) {
            if NON_SMOOTH.contains(&name.as_str()) {
                return Err(ParseError {
                    pos,
                    message: format!("non-smooth function `{name}` is not supported"),
                });
            }
            let Some(f) = Fun::from_name(&name) else {
                return Err(ParseError {
                    pos,
                    message: format!("unknown function `{name}`"),
                });
            };
            self.i += 1; // consume '('
            let arg = self.expr()?;
            self.expect(Tok::RParen, "closing `)`")?;
            return Ok(Expr::fun(f, &arg));
        }
        Err(ParseError {
            pos,
            message: format!("unknown identifier `{name}` (variables are x1..x{})", self.dim),
        })
    }
}

/// Parse an expression over x1..xn.
pub fn parse(text: &str, n: usize) -> Result<Expr, ParseError> {
    let toks = Lexer { src: text.as_bytes(), pos: 0 }.tokens()?;
    if toks.is_empty() {
        return Err(ParseError { pos: 0, message: "empty expression".into() });
    }
    let mut p = Parser { toks, i: 0, dim: n, end: text.len() };
    let e = p.expr()?;
    if p.i < p.toks.len() {
        return Err(ParseError {
            pos: p.pos(),
            message: format!("unexpected trailing token `{:?}`", p.peek().unwrap()),
        });
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(s: &str, n: usize) -> Expr {
        parse(s, n).unwrap()
    }

    fn ev(e: &Expr, x: &[f64]) -> f64 {
        e.eval(x).unwrap()
    }

    /// Central finite difference in direction i (1-based).
    fn fd(e: &Expr, i: usize, x: &[f64]) -> f64 {
        let h = 1e-5 * (1.0 + x[i - 1].abs());
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i - 1] += h;
        xm[i - 1] -= h;
        (ev(e, &xp) - ev(e, &xm)) / (2.0 * h)
    }

    #[test]
    fn parses_and_evaluates_frozen_values() {
        // values computed by hand, not by this library
        assert_eq!(ev(&p("2 + 3*4", 1), &[0.0]), 14.0);
        assert_eq!(ev(&p("2^3^2", 1), &[0.0]), 512.0); // right-assoc
        assert_eq!(ev(&p("-x1^2", 1), &[3.0]), -9.0); // unary minus binds looser than ^
        assert_eq!(ev(&p("(1 - x1)/(1 + x1)", 1), &[0.5]), 1.0 / 3.0);
        assert!((ev(&p("exp(-x1^2/2)", 1), &[1.0]) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((ev(&p("cot(x1)", 1), &[1.0]) - 1.0 / 1.0f64.tan()).abs() < 1e-15);
        assert!((ev(&p("x1^x2", 2), &[2.0, 10.0]) - 1024.0).abs() < 1e-9);
        assert_eq!(ev(&p("1e2 + 1E-2", 1), &[0.0]), 100.01);
        assert_eq!(ev(&p("2*-3", 1), &[0.0]), -6.0);
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let cases = [
            ("x1^2*sin(x2)", vec![1.3, 0.7]),
            ("exp(-x1^2/2 + x2)", vec![0.4, -0.3]),
            ("log(1 + x1^2)", vec![0.8, 0.0]),
            ("sqrt(1 + x2^2)", vec![0.0, 1.7]),
            ("tan(x1/4)/(2 + cos(x2))", vec![0.9, 2.0]),
            ("cot(1 + x1^2)", vec![0.5, 0.0]),
            ("tanh(x1*x2)", vec![0.6, -1.1]),
            ("x1^x2", vec![1.5, 2.5]),
            ("(x1 + x2)^3 - x1/x2", vec![0.3, 0.9]),
        ];
        for (src, x) in cases {
            let e = p(src, 2);
            for i in 1..=2 {
                let exact = ev(&e.diff(i), &x);
                let approx = fd(&e, i, &x);
                let scale = 1.0 + exact.abs();
                assert!(
                    (exact - approx).abs() < 1e-6 * scale,
                    "d/dx{i} {src} at {x:?}: {exact} vs {approx}"
                );
            }
        }
    }

    #[test]
    fn repeated_derivatives_of_polynomials_are_exact() {
        let e = p("x1^4", 1);
        let d4 = e.diff(1).diff(1).diff(1).diff(1);
        assert_eq!(d4.as_const(), Some(24.0));
        assert_eq!(d4.diff(1).as_const(), Some(0.0));

        let q = p("x1^2*x2 - 3*x1*x2^2", 2);
        // ∂²/∂x1∂x2 = 2 x1 - 6 x2, frozen check at (2, 1) -> -2
        assert_eq!(ev(&q.diff(1).diff(2), &[2.0, 1.0]), -2.0);
    }

    #[test]
    fn display_reparses_to_same_values() {
        let cases = [
            "x1^2*sin(x2) - cot(x1 + 2)",
            "-x1/(x2 + 3)^2",
            "exp(-x1^2/2)*sqrt(1 + x2^2)",
            "2^-x1",
            "(x1 - x2)*(x1 + x2)/(1 + x1^2*x2^2)",
        ];
        let x = [0.37, -1.21];
        for src in cases {
            let e = p(src, 2);
            let rendered = e.to_string();
            let back = parse(&rendered, 2).unwrap_or_else(|err| {
                panic!("rendered form `{rendered}` failed to reparse: {err}")
            });
            let a = ev(&e, &x);
            let b = ev(&back, &x);
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{src} -> {rendered}");
        }
    }

    #[test]
    fn parse_errors_carry_positions() {
        let err = parse("x1 + * x2", 2).unwrap_err();
        assert_eq!(err.pos, 5);

        let err = parse("x3 + 1", 2).unwrap_err();
        assert_eq!(err.pos, 0);
        assert!(err.message.contains("x3"), "{}", err.message);

        let err = parse("abs(x1)", 1).unwrap_err();
        assert!(err.message.contains("non-smooth"), "{}", err.message);

        let err = parse("foo(x1)", 1).unwrap_err();
        assert!(err.message.contains("unknown function"), "{}", err.message);

        let err = parse("sin(x1", 1).unwrap_err();
        assert_eq!(err.pos, 6); // end of input

        let err = parse("1e999", 1).unwrap_err();
        assert!(err.message.contains("out of range"), "{}", err.message);

        let err = parse("", 1).unwrap_err();
        assert!(err.message.contains("empty"), "{}", err.message);

        let err = parse("x1 x2", 2).unwrap_err();
        assert!(err.message.contains("trailing"), "{}", err.message);

        let err = parse("y + 1", 2).unwrap_err();
        assert!(err.message.contains("unknown identifier"), "{}", err.message);
    }

    #[test]
    fn eval_domain_errors_report_node_and_point() {
        let e = p("log(x1)", 1);
        let err = e.eval(&[-1.0]).unwrap_err();
        assert_eq!(err.kind, EvalErrorKind::LogNonPositive(-1.0));
        assert_eq!(err.point, vec![-1.0]);
        assert!(err.expr.contains("log"));

        let err = p("1/x1", 1).eval(&[0.0]).unwrap_err();
        assert_eq!(err.kind, EvalErrorKind::DivisionByZero);

        let err = p("sqrt(x1)", 1).eval(&[-2.0]).unwrap_err();
        assert_eq!(err.kind, EvalErrorKind::SqrtNegative(-2.0));

        let err = p("x1^x2", 2).eval(&[-2.0, 0.5]).unwrap_err();
        assert!(matches!(err.kind, EvalErrorKind::PowDomain { .. }));

        let err = p("x2", 2).eval(&[1.0]).unwrap_err();
        assert!(matches!(err.kind, EvalErrorKind::VarOutOfRange { index: 2, dim: 1 }));
    }

    #[test]
    fn constant_folding_short_circuits() {
        let zero = Expr::zero();
        let nasty = p("log(x1)", 1); // would blow up at x1 <= 0
        let prod = Expr::mul(&zero, &nasty);
        assert!(prod.is_zero());
        assert_eq!(prod.eval(&[-5.0]).unwrap(), 0.0);

        let s = Expr::sum(vec![Expr::zero(), p("x1", 1), Expr::zero()]);
        assert_eq!(ev(&s, &[7.0]), 7.0);
    }

    // ── property tests ──────────────────────────────────────────────────

    fn leaf() -> impl Strategy<Value = Expr> {
        prop_oneof![
            (-2.0..2.0f64).prop_map(Expr::num),
            (1usize..=2).prop_map(Expr::var),
        ]
    }

    /// Smooth, blowup-free expressions on [-1,1]^2.
    fn smooth_expr() -> impl Strategy<Value = Expr> {
        leaf().prop_recursive(3, 24, 2, |inner| {
            prop_oneof![
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::add(&a, &b)),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::sub(&a, &b)),
                (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::mul(&a, &b)),
                inner.clone().prop_map(|a| Expr::fun(Fun::Sin, &a)),
                inner.clone().prop_map(|a| Expr::fun(Fun::Cos, &a)),
                inner.clone().prop_map(|a| Expr::fun(Fun::Tanh, &a)),
            ]
        })
    }

    proptest! {
        #[test]
        fn diff_is_linear(p1 in smooth_expr(), p2 in smooth_expr(),
                          x in prop::array::uniform2(-1.0..1.0f64)) {
            let lhs = Expr::add(&p1, &p2).diff(1);
            let rhs = Expr::add(&p1.diff(1), &p2.diff(1));
            let a = ev(&lhs, &x);
            let b = ev(&rhs, &x);
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs())));
        }

        #[test]
        fn diff_product_rule(p1 in smooth_expr(), p2 in smooth_expr(),
                             x in prop::array::uniform2(-1.0..1.0f64)) {
            let lhs = Expr::mul(&p1, &p2).diff(2);
            let rhs = Expr::add(&Expr::mul(&p1.diff(2), &p2), &Expr::mul(&p1, &p2.diff(2)));
            let a = ev(&lhs, &x);
            let b = ev(&rhs, &x);
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs())));
        }

        #[test]
        fn display_round_trips(e in smooth_expr(), x in prop::array::uniform2(-1.0..1.0f64)) {
            let back = parse(&e.to_string(), 2).unwrap();
            let a = ev(&e, &x);
            let b = ev(&back, &x);
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
