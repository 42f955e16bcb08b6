use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

/// The value domain a sequence cell ranges over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    /// Token symbols.
    Sym,
    /// Real numbers (indices, widths, arithmetic results).
    Num,
    /// Booleans.
    Bool,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Sym => f.write_str("symbol"),
            Domain::Num => f.write_str("number"),
            Domain::Bool => f.write_str("boolean"),
        }
    }
}

/// A single cell of a sequence.
///
/// Values carry a total order (domain first, then the natural order within a
/// domain) so they can live in ordered sets and break ties deterministically.
/// Numbers are normalized on construction: `-0.0` becomes `0.0`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub enum Value {
    Sym(u8),
    Num(f64),
    Bool(bool),
}

impl Value {
    pub fn num(x: f64) -> Value {
        Value::Num(if x == 0.0 { 0.0 } else { x })
    }

    pub fn domain(&self) -> Domain {
        match self {
            Value::Sym(_) => Domain::Sym,
            Value::Num(_) => Domain::Num,
            Value::Bool(_) => Domain::Bool,
        }
    }

    /// Numeric view used by averaging and by the residual stream.
    /// Booleans map to 0/1; symbols have no numeric view.
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Value::Num(x) => Some(x),
            Value::Bool(b) => Some(if b { 1.0 } else { 0.0 }),
            Value::Sym(_) => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        match *self {
            Value::Num(x) => x.is_finite(),
            _ => true,
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Value::Sym(_) => 0,
            Value::Num(_) => 1,
            Value::Bool(_) => 2,
        }
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Value {}

impl PartialOrd for Value {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Value {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Value::Sym(a), Value::Sym(b)) => a.cmp(b),
            (Value::Num(a), Value::Num(b)) => a.total_cmp(b),
            (Value::Bool(a), Value::Bool(b)) => a.cmp(b),
            _ => self.rank().cmp(&other.rank()),
        }
    }
}

impl std::hash::Hash for Value {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.rank().hash(state);
        match *self {
            Value::Sym(s) => s.hash(state),
            Value::Num(x) => x.to_bits().hash(state),
            Value::Bool(b) => b.hash(state),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Value::Sym(s) => write!(f, "{}", symbol_char(s)),
            Value::Num(x) if x.fract() == 0.0 && x.abs() < 1e15 => write!(f, "{}", x as i64),
            Value::Num(x) => write!(f, "{x}"),
            Value::Bool(true) => f.write_str("True"),
            Value::Bool(false) => f.write_str("False"),
        }
    }
}

/// Printable character for the `i`-th vocabulary symbol (`a`, `b`, ...).
pub fn symbol_char(index: u8) -> char {
    (b'a' + index) as char
}

/// Inverse of [`symbol_char`].
pub fn symbol_index(c: char) -> Option<u8> {
    if c.is_ascii_lowercase() {
        Some(c as u8 - b'a')
    } else {
        None
    }
}

/// Outputs of two runs agree: exact for symbols/booleans, within `tol` for numbers.
pub fn values_match(a: &[Value], b: &[Value], tol: f64) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| match (x, y) {
            (Value::Num(p), Value::Num(q)) => (p - q).abs() <= tol,
            _ => x == y,
        })
}
