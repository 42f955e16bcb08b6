//! The fixed lambda and predicate libraries.
//!
//! Library order is part of the token format: the position of a lambda in its
//! `ALL` array is the index the codec writes.

use serde::{Deserialize, Serialize};

use super::value::{Domain, Value};

/// Which lambda library an entry belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Library {
    Unary,
    Binary,
    BinaryBool,
}

/// Position of a lambda inside its library.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LambdaId {
    pub library: Library,
    pub index: usize,
}

/// One-input lambdas used by `Map`. All take numbers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnaryFn {
    Inc,
    Dec,
    Double,
    Half,
    Neg,
    Abs,
    Square,
    Relu,
    IsZero,
    IsPositive,
}

impl UnaryFn {
    pub const ALL: [UnaryFn; 10] = [
        UnaryFn::Inc,
        UnaryFn::Dec,
        UnaryFn::Double,
        UnaryFn::Half,
        UnaryFn::Neg,
        UnaryFn::Abs,
        UnaryFn::Square,
        UnaryFn::Relu,
        UnaryFn::IsZero,
        UnaryFn::IsPositive,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&f| f == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<UnaryFn> {
        Self::ALL.get(i).copied()
    }

    pub fn id(self) -> LambdaId {
        LambdaId { library: Library::Unary, index: self.index() }
    }

    pub fn input_domain(self) -> Domain {
        Domain::Num
    }

    pub fn output_domain(self) -> Domain {
        match self {
            UnaryFn::IsZero | UnaryFn::IsPositive => Domain::Bool,
            _ => Domain::Num,
        }
    }

    /// Applies the lambda. Returns `None` when the argument is outside the
    /// lambda's domain (never happens for well-typed programs).
    pub fn apply(self, v: Value) -> Option<Value> {
        let Value::Num(x) = v else { return None };
        Some(match self {
            UnaryFn::Inc => Value::num(x + 1.0),
            UnaryFn::Dec => Value::num(x - 1.0),
            UnaryFn::Double => Value::num(2.0 * x),
            UnaryFn::Half => Value::num(x / 2.0),
            UnaryFn::Neg => Value::num(-x),
            UnaryFn::Abs => Value::num(x.abs()),
            UnaryFn::Square => Value::num(x * x),
            UnaryFn::Relu => Value::num(if x > 0.0 { x } else { 0.0 }),
            UnaryFn::IsZero => Value::Bool(x == 0.0),
            UnaryFn::IsPositive => Value::Bool(x > 0.0),
        })
    }

    pub fn source(self) -> &'static str {
        match self {
            UnaryFn::Inc => "lambda x: x + 1",
            UnaryFn::Dec => "lambda x: x - 1",
            UnaryFn::Double => "lambda x: 2 * x",
            UnaryFn::Half => "lambda x: x / 2",
            UnaryFn::Neg => "lambda x: -x",
            UnaryFn::Abs => "lambda x: abs(x)",
            UnaryFn::Square => "lambda x: x ** 2",
            UnaryFn::Relu => "lambda x: x if x > 0 else 0",
            UnaryFn::IsZero => "lambda x: x == 0",
            UnaryFn::IsPositive => "lambda x: x > 0",
        }
    }
}

/// Two-input lambdas used by `SequenceMap`: the numeric `Binary` library
/// followed by the boolean-valued `BinaryBool` library.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinaryFn {
    Add,
    Sub,
    Mul,
    Min,
    Max,
    Lt,
    Gt,
    Eq,
    Ne,
    And,
    Or,
}

impl BinaryFn {
    /// Both libraries, `Binary` first. The codec indexes into this array.
    pub const ALL: [BinaryFn; 11] = [
        BinaryFn::Add,
        BinaryFn::Sub,
        BinaryFn::Mul,
        BinaryFn::Min,
        BinaryFn::Max,
        BinaryFn::Lt,
        BinaryFn::Gt,
        BinaryFn::Eq,
        BinaryFn::Ne,
        BinaryFn::And,
        BinaryFn::Or,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&f| f == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<BinaryFn> {
        Self::ALL.get(i).copied()
    }

    pub fn library(self) -> Library {
        if self.index() < 5 {
            Library::Binary
        } else {
            Library::BinaryBool
        }
    }

    pub fn id(self) -> LambdaId {
        let lib = self.library();
        let offset = if lib == Library::Binary { 0 } else { 5 };
        LambdaId { library: lib, index: self.index() - offset }
    }

    pub fn output_domain(self) -> Domain {
        match self.library() {
            Library::Binary => Domain::Num,
            _ => Domain::Bool,
        }
    }

    /// Whether the lambda accepts operands of domain `d` (both operands share
    /// one domain).
    pub fn accepts(self, d: Domain) -> bool {
        match self {
            BinaryFn::Add | BinaryFn::Sub | BinaryFn::Mul | BinaryFn::Min | BinaryFn::Max => d == Domain::Num,
            BinaryFn::Lt | BinaryFn::Gt | BinaryFn::Eq | BinaryFn::Ne => true,
            BinaryFn::And | BinaryFn::Or => d == Domain::Bool,
        }
    }

    pub fn apply(self, a: Value, b: Value) -> Option<Value> {
        if a.domain() != b.domain() || !self.accepts(a.domain()) {
            return None;
        }
        Some(match self {
            BinaryFn::Add => Value::num(a.as_f64()? + b.as_f64()?),
            BinaryFn::Sub => Value::num(a.as_f64()? - b.as_f64()?),
            BinaryFn::Mul => Value::num(a.as_f64()? * b.as_f64()?),
            BinaryFn::Min => Value::num(a.as_f64()?.min(b.as_f64()?)),
            BinaryFn::Max => Value::num(a.as_f64()?.max(b.as_f64()?)),
            BinaryFn::Lt => Value::Bool(a < b),
            BinaryFn::Gt => Value::Bool(a > b),
            BinaryFn::Eq => Value::Bool(a == b),
            BinaryFn::Ne => Value::Bool(a != b),
            BinaryFn::And => Value::Bool(a == Value::Bool(true) && b == Value::Bool(true)),
            BinaryFn::Or => Value::Bool(a == Value::Bool(true) || b == Value::Bool(true)),
        })
    }

    pub fn source(self) -> &'static str {
        match self {
            BinaryFn::Add => "lambda x, y: x + y",
            BinaryFn::Sub => "lambda x, y: x - y",
            BinaryFn::Mul => "lambda x, y: x * y",
            BinaryFn::Min => "lambda x, y: min(x, y)",
            BinaryFn::Max => "lambda x, y: max(x, y)",
            BinaryFn::Lt => "lambda x, y: x < y",
            BinaryFn::Gt => "lambda x, y: x > y",
            BinaryFn::Eq => "lambda x, y: x == y",
            BinaryFn::Ne => "lambda x, y: x != y",
            BinaryFn::And => "lambda x, y: x and y",
            BinaryFn::Or => "lambda x, y: x or y",
        }
    }
}

/// Comparison used by `Select`. A query position selects key position `k`
/// when `predicate(key[k], query)` holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Predicate {
    Eq,
    Neq,
    Lt,
    Leq,
    Gt,
    Geq,
    True,
}

impl Predicate {
    pub const ALL: [Predicate; 7] =
        [Predicate::Eq, Predicate::Neq, Predicate::Lt, Predicate::Leq, Predicate::Gt, Predicate::Geq, Predicate::True];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&p| p == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<Predicate> {
        Self::ALL.get(i).copied()
    }

    pub fn holds(self, key: Value, query: Value) -> bool {
        match self {
            Predicate::Eq => key == query,
            Predicate::Neq => key != query,
            Predicate::Lt => key < query,
            Predicate::Leq => key <= query,
            Predicate::Gt => key > query,
            Predicate::Geq => key >= query,
            Predicate::True => true,
        }
    }

    /// Holds whenever key and query are the same value.
    pub fn is_reflexive(self) -> bool {
        matches!(self, Predicate::Eq | Predicate::Leq | Predicate::Geq | Predicate::True)
    }

    pub fn name(self) -> &'static str {
        match self {
            Predicate::Eq => "EQ",
            Predicate::Neq => "NEQ",
            Predicate::Lt => "LT",
            Predicate::Leq => "LEQ",
            Predicate::Gt => "GT",
            Predicate::Geq => "GEQ",
            Predicate::True => "TRUE",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_sizes_and_ids() {
        assert_eq!(UnaryFn::ALL.len(), 10);
        assert_eq!(BinaryFn::Max.id(), LambdaId { library: Library::Binary, index: 4 });
        assert_eq!(BinaryFn::Lt.id(), LambdaId { library: Library::BinaryBool, index: 0 });
        assert_eq!(BinaryFn::Or.id(), LambdaId { library: Library::BinaryBool, index: 5 });
        for (i, f) in UnaryFn::ALL.iter().enumerate() {
            assert_eq!(UnaryFn::from_index(i), Some(*f));
        }
    }

    #[test]
    fn abs_and_relu_agree_on_non_negative_inputs() {
        for x in 0..10 {
            let v = Value::num(x as f64);
            assert_eq!(UnaryFn::Abs.apply(v), UnaryFn::Relu.apply(v));
        }
        assert_ne!(UnaryFn::Abs.apply(Value::num(-1.0)), UnaryFn::Relu.apply(Value::num(-1.0)));
    }

    #[test]
    fn binary_domain_checks() {
        assert_eq!(BinaryFn::Add.apply(Value::Sym(0), Value::Sym(1)), None);
        assert_eq!(BinaryFn::Eq.apply(Value::Sym(0), Value::Sym(0)), Some(Value::Bool(true)));
        assert_eq!(BinaryFn::And.apply(Value::Bool(true), Value::Bool(false)), Some(Value::Bool(false)));
        assert_eq!(BinaryFn::Min.apply(Value::num(3.0), Value::num(-2.0)), Some(Value::num(-2.0)));
    }

    #[test]
    fn predicates_compare_key_against_query() {
        assert!(Predicate::Lt.holds(Value::num(1.0), Value::num(2.0)));
        assert!(!Predicate::Lt.holds(Value::num(2.0), Value::num(1.0)));
        assert!(Predicate::True.holds(Value::Sym(0), Value::Sym(4)));
    }
}
