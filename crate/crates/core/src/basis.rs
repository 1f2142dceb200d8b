//! The user-declared library of scalar basis functions Z(x) together with
//! exact evaluation and symbolic differentiation.
//!
//! Every matrix convention downstream (rows of `Z0`, columns of `K` and `F`)
//! keys off the declared order of the library entries, so the order is fixed
//! at parse time and never rearranged.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Expression tree for one scalar basis function over the variables `x1..xn`.
#[derive(Debug, Clone, PartialEq)]
pub enum BasisExpr {
    Const(f64),
    /// Zero-based state index.
    Var(usize),
    Add(Box<BasisExpr>, Box<BasisExpr>),
    Sub(Box<BasisExpr>, Box<BasisExpr>),
    Mul(Box<BasisExpr>, Box<BasisExpr>),
    Pow(Box<BasisExpr>, i32),
    Sin(Box<BasisExpr>),
    Cos(Box<BasisExpr>),
    Tanh(Box<BasisExpr>),
    Exp(Box<BasisExpr>),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("entry {entry}, position {pos}: {msg}")]
    Syntax { entry: usize, pos: usize, msg: String },
    #[error("entry {entry}, position {pos}: variable x{index} exceeds state dimension {n}")]
    UnknownVariable { entry: usize, pos: usize, index: usize, n: usize },
    #[error("entry {entry}, position {pos}: unsupported function `{name}`")]
    UnsupportedFunction { entry: usize, pos: usize, name: String },
    #[error("library must contain at least one expression")]
    Empty,
    #[error("state dimension must be positive")]
    ZeroDimension,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("numeric overflow while evaluating basis entry {entry}")]
    Overflow { entry: usize },
    #[error("input vector has length {got}, expected {expected}")]
    DimensionMismatch { got: usize, expected: usize },
}

impl BasisExpr {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            BasisExpr::Const(c) => *c,
            BasisExpr::Var(i) => x[*i],
            BasisExpr::Add(a, b) => a.eval(x) + b.eval(x),
            BasisExpr::Sub(a, b) => a.eval(x) - b.eval(x),
            BasisExpr::Mul(a, b) => a.eval(x) * b.eval(x),
            BasisExpr::Pow(a, k) => a.eval(x).powi(*k),
            BasisExpr::Sin(a) => a.eval(x).sin(),
            BasisExpr::Cos(a) => a.eval(x).cos(),
            BasisExpr::Tanh(a) => a.eval(x).tanh(),
            BasisExpr::Exp(a) => a.eval(x).exp(),
        }
    }

    /// Exact partial derivative with respect to `x_{var}` (zero-based).
    ///
    /// The closed function set keeps this total: every supported node has a
    /// derivative expressible in the same node set.
    pub fn diff(&self, var: usize) -> BasisExpr {
        use BasisExpr::*;
        match self {
            Const(_) => Const(0.0),
            Var(i) => Const(if *i == var { 1.0 } else { 0.0 }),
            Add(a, b) => add(a.diff(var), b.diff(var)),
            Sub(a, b) => sub(a.diff(var), b.diff(var)),
            Mul(a, b) => add(
                mul(a.diff(var), (**b).clone()),
                mul((**a).clone(), b.diff(var)),
            ),
            Pow(a, k) => mul(
                mul(Const(f64::from(*k)), pow((**a).clone(), *k - 1)),
                a.diff(var),
            ),
            Sin(a) => mul(Cos(a.clone()), a.diff(var)),
            Cos(a) => mul(mul(Const(-1.0), Sin(a.clone())), a.diff(var)),
            Tanh(a) => mul(
                sub(Const(1.0), pow(Tanh(a.clone()), 2)),
                a.diff(var),
            ),
            Exp(a) => mul(Exp(a.clone()), a.diff(var)),
        }
    }
}

// Constructors with constant folding so derivative trees stay finite-depth
// under repeated differentiation.
fn add(a: BasisExpr, b: BasisExpr) -> BasisExpr {
    use BasisExpr::*;
    match (a, b) {
        (Const(x), Const(y)) => Const(x + y),
        (Const(x), b) if x == 0.0 => b,
        (a, Const(y)) if y == 0.0 => a,
        (a, b) => Add(Box::new(a), Box::new(b)),
    }
}

fn sub(a: BasisExpr, b: BasisExpr) -> BasisExpr {
    use BasisExpr::*;
    match (a, b) {
        (Const(x), Const(y)) => Const(x - y),
        (a, Const(y)) if y == 0.0 => a,
        (a, b) => Sub(Box::new(a), Box::new(b)),
    }
}

fn mul(a: BasisExpr, b: BasisExpr) -> BasisExpr {
    use BasisExpr::*;
    match (a, b) {
        (Const(x), Const(y)) => Const(x * y),
        (Const(x), _) | (_, Const(x)) if x == 0.0 => Const(0.0),
        (Const(x), b) if x == 1.0 => b,
        (a, Const(y)) if y == 1.0 => a,
        (a, b) => Mul(Box::new(a), Box::new(b)),
    }
}

fn pow(a: BasisExpr, k: i32) -> BasisExpr {
    use BasisExpr::*;
    match k {
        0 => Const(1.0),
        1 => a,
        _ => Pow(Box::new(a), k),
    }
}

/// Ordered library of `s` basis expressions defining Z: R^n -> R^s.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionLibrary {
    n: usize,
    basis: Vec<BasisExpr>,
    source: String,
    coordinate_prefix: bool,
}

impl FunctionLibrary {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of basis entries `s`.
    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    pub fn basis(&self) -> &[BasisExpr] {
        &self.basis
    }

    /// Normalized source text the library was parsed from.
    pub fn source(&self) -> &str {
        &self.source
    }

    /// True iff entries `1..n` are exactly `x1..xn`, so the partition
    /// Z(x) = [x; Q(x)] is well defined.
    pub fn coordinate_prefix(&self) -> bool {
        self.coordinate_prefix
    }

    /// FNV-1a hash of the normalized source, used to tie data sets to the
    /// library they were collected under.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.source.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    /// Z(x).
    pub fn evaluate(&self, x: &DVector<f64>) -> Result<DVector<f64>, EvalError> {
        if x.len() != self.n {
            return Err(EvalError::DimensionMismatch { got: x.len(), expected: self.n });
        }
        let xs = x.as_slice();
        let mut out = DVector::zeros(self.basis.len());
        for (i, e) in self.basis.iter().enumerate() {
            let v = e.eval(xs);
            if !v.is_finite() {
                return Err(EvalError::Overflow { entry: i + 1 });
            }
            out[i] = v;
        }
        Ok(out)
    }

    /// Analytic Jacobian Z'(x), an s-by-n matrix.
    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, EvalError> {
        if x.len() != self.n {
            return Err(EvalError::DimensionMismatch { got: x.len(), expected: self.n });
        }
        let xs = x.as_slice();
        let mut out = DMatrix::zeros(self.basis.len(), self.n);
        for (i, e) in self.basis.iter().enumerate() {
            for j in 0..self.n {
                let v = e.diff(j).eval(xs);
                if !v.is_finite() {
                    return Err(EvalError::Overflow { entry: i + 1 });
                }
                out[(i, j)] = v;
            }
        }
        Ok(out)
    }
}

/// Parse a semicolon/newline-separated list of expressions over `x1..xn`.
pub fn parse_library(text: &str, n: usize) -> Result<FunctionLibrary, ParseError> {
    if n == 0 {
        return Err(ParseError::ZeroDimension);
    }
    let entries: Vec<&str> = text
        .split(|c| c == ';' || c == '\n')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if entries.is_empty() {
        return Err(ParseError::Empty);
    }
    let mut basis = Vec::with_capacity(entries.len());
    for (idx, entry) in entries.iter().enumerate() {
        let expr = Parser::new(entry, idx + 1, n)?.parse()?;
        basis.push(expr);
    }
    let coordinate_prefix =
        basis.len() >= n && (0..n).all(|i| basis[i] == BasisExpr::Var(i));
    Ok(FunctionLibrary {
        n,
        source: entries.join("; "),
        basis,
        coordinate_prefix,
    })
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Caret,
    LParen,
    RParen,
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    entry: usize,
    len: usize,
    n: usize,
}

impl Parser {
    fn new(src: &str, entry: usize, n: usize) -> Result<Self, ParseError> {
        let mut toks = Vec::new();
        let bytes: Vec<char> = src.chars().collect();
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i];
            let start = i;
            match c {
                ' ' | '\t' | '\r' => i += 1,
                '+' => { toks.push((start, Tok::Plus)); i += 1 }
                '-' => { toks.push((start, Tok::Minus)); i += 1 }
                '*' => { toks.push((start, Tok::Star)); i += 1 }
                '^' => { toks.push((start, Tok::Caret)); i += 1 }
                '(' => { toks.push((start, Tok::LParen)); i += 1 }
                ')' => { toks.push((start, Tok::RParen)); i += 1 }
                c if c.is_ascii_digit() || c == '.' => {
                    let mut j = i;
                    while j < bytes.len()
                        && (bytes[j].is_ascii_digit()
                            || bytes[j] == '.'
                            || bytes[j] == 'e'
                            || bytes[j] == 'E'
                            || ((bytes[j] == '+' || bytes[j] == '-')
                                && j > i
                                && (bytes[j - 1] == 'e' || bytes[j - 1] == 'E')))
                    {
                        j += 1;
                    }
                    let text: String = bytes[i..j].iter().collect();
                    let v = text.parse::<f64>().map_err(|_| ParseError::Syntax {
                        entry,
                        pos: start + 1,
                        msg: format!("invalid number `{text}`"),
                    })?;
                    toks.push((start, Tok::Num(v)));
                    i = j;
                }
                c if c.is_ascii_alphabetic() => {
                    let mut j = i;
                    while j < bytes.len() && (bytes[j].is_ascii_alphanumeric() || bytes[j] == '_') {
                        j += 1;
                    }
                    toks.push((start, Tok::Ident(bytes[i..j].iter().collect())));
                    i = j;
                }
                other => {
                    return Err(ParseError::Syntax {
                        entry,
                        pos: start + 1,
                        msg: format!("unexpected character `{other}`"),
                    })
                }
            }
        }
        Ok(Parser { toks, pos: 0, entry, len: src.chars().count(), n })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn here(&self) -> usize {
        self.toks.get(self.pos).map_or(self.len + 1, |(p, _)| p + 1)
    }

    fn bump(&mut self) -> Option<(usize, Tok)> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn syntax(&self, msg: impl Into<String>) -> ParseError {
        ParseError::Syntax { entry: self.entry, pos: self.here(), msg: msg.into() }
    }

    fn parse(mut self) -> Result<BasisExpr, ParseError> {
        let e = self.expr()?;
        if self.pos != self.toks.len() {
            return Err(self.syntax("trailing input"));
        }
        Ok(e)
    }

    fn expr(&mut self) -> Result<BasisExpr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.bump();
                    let rhs = self.term()?;
                    lhs = BasisExpr::Add(Box::new(lhs), Box::new(rhs));
                }
                Some(Tok::Minus) => {
                    self.bump();
                    let rhs = self.term()?;
                    lhs = BasisExpr::Sub(Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<BasisExpr, ParseError> {
        let mut lhs = self.factor()?;
        while matches!(self.peek(), Some(Tok::Star)) {
            self.bump();
            let rhs = self.factor()?;
            lhs = BasisExpr::Mul(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<BasisExpr, ParseError> {
        let base = self.atom()?;
        if matches!(self.peek(), Some(Tok::Caret)) {
            self.bump();
            let neg = if matches!(self.peek(), Some(Tok::Minus)) {
                self.bump();
                true
            } else {
                false
            };
            match self.bump() {
                Some((_, Tok::Num(v))) if v.fract() == 0.0 && v.abs() <= i32::MAX as f64 => {
                    let k = v as i32;
                    Ok(BasisExpr::Pow(Box::new(base), if neg { -k } else { k }))
                }
                _ => {
                    self.pos = self.pos.saturating_sub(1);
                    Err(self.syntax("exponent must be an integer literal"))
                }
            }
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<BasisExpr, ParseError> {
        let pos0 = self.here();
        match self.bump() {
            Some((_, Tok::Num(v))) => Ok(BasisExpr::Const(v)),
            Some((_, Tok::Minus)) => {
                let inner = self.factor()?;
                Ok(mul(BasisExpr::Const(-1.0), inner))
            }
            Some((_, Tok::LParen)) => {
                let inner = self.expr()?;
                match self.bump() {
                    Some((_, Tok::RParen)) => Ok(inner),
                    _ => {
                        self.pos = self.pos.saturating_sub(1);
                        Err(self.syntax("expected `)`"))
                    }
                }
            }
            Some((p, Tok::Ident(name))) => {
                if let Some(rest) = name.strip_prefix('x') {
                    if let Ok(idx) = rest.parse::<usize>() {
                        if idx == 0 || idx > self.n {
                            return Err(ParseError::UnknownVariable {
                                entry: self.entry,
                                pos: p + 1,
                                index: idx,
                                n: self.n,
                            });
                        }
                        return Ok(BasisExpr::Var(idx - 1));
                    }
                }
                // Function application.
                if !matches!(self.peek(), Some(Tok::LParen)) {
                    return Err(ParseError::Syntax {
                        entry: self.entry,
                        pos: p + 1,
                        msg: format!("unknown variable `{name}` (expected x1..x{})", self.n),
                    });
                }
                self.bump();
                let arg = self.expr()?;
                match self.bump() {
                    Some((_, Tok::RParen)) => {}
                    _ => {
                        self.pos = self.pos.saturating_sub(1);
                        return Err(self.syntax("expected `)`"));
                    }
                }
                let arg = Box::new(arg);
                match name.as_str() {
                    "sin" => Ok(BasisExpr::Sin(arg)),
                    "cos" => Ok(BasisExpr::Cos(arg)),
                    "tanh" => Ok(BasisExpr::Tanh(arg)),
                    "exp" => Ok(BasisExpr::Exp(arg)),
                    _ => Err(ParseError::UnsupportedFunction {
                        entry: self.entry,
                        pos: p + 1,
                        name,
                    }),
                }
            }
            _ => Err(ParseError::Syntax {
                entry: self.entry,
                pos: pos0,
                msg: "expected expression".into(),
            }),
        }
    }
}
