//! Reference interpreter: the semantic ground truth for every other stage.

use std::collections::BTreeMap;

use thiserror::Error;

use super::program::{Node, Program, RaspConfig, Ref};
use super::specs::{value_kinds, ValueKind};
use super::value::Value;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("input length {len} outside 1..={max}")]
    BadLength { len: usize, max: usize },
    #[error("input symbol {symbol} outside the vocabulary of {vocab}")]
    BadSymbol { symbol: u8, vocab: u8 },
    #[error("var{} produced a non-finite value", node + 1)]
    NonFinite { node: usize },
    #[error("var{}: lambda undefined on {value}", node + 1)]
    Partial { node: usize, value: Value },
}

/// Value of one expression on one input.
#[derive(Clone, Debug, PartialEq)]
pub enum Evaluated {
    Sop(Vec<Value>),
    /// `matrix[q][k]`: query position `q` selects key position `k`.
    Selector(Vec<Vec<bool>>),
}

impl Evaluated {
    pub fn as_sop(&self) -> Option<&[Value]> {
        match self {
            Evaluated::Sop(v) => Some(v),
            Evaluated::Selector(_) => None,
        }
    }
}

/// Interpreter bound to one program; reuse it to run many inputs.
pub struct Interpreter<'p> {
    program: &'p Program,
    config: RaspConfig,
    kinds: Vec<Option<ValueKind>>,
}

impl<'p> Interpreter<'p> {
    pub fn new(program: &'p Program, config: &RaspConfig) -> Self {
        Interpreter { program, config: config.clone(), kinds: value_kinds(program) }
    }

    pub fn check_input(&self, input: &[u8]) -> Result<(), EvalError> {
        check_input(&self.config, input)
    }

    /// Values of every node on `input`.
    pub fn run_all(&self, input: &[u8]) -> Result<Vec<Evaluated>, EvalError> {
        self.check_input(input)?;
        let n = input.len();
        let tokens: Vec<Value> = input.iter().map(|&s| Value::Sym(s)).collect();
        let indices: Vec<Value> = (0..n).map(|i| Value::num(i as f64)).collect();
        let mut out: Vec<Evaluated> = Vec::with_capacity(self.program.len());
        for (i, node) in self.program.nodes().iter().enumerate() {
            let sop = |r: Ref| -> &[Value] { sop_of(r, &tokens, &indices, &out) };
            let sel = |r: Ref| -> &[Vec<bool>] { selector_of(r, &out) };
            let value = match *node {
                Node::Select { keys, queries, predicate } => {
                    let k = sop(keys);
                    let q = sop(queries);
                    Evaluated::Selector(
                        q.iter().map(|&qv| k.iter().map(|&kv| predicate.holds(kv, qv)).collect()).collect(),
                    )
                }
                Node::Aggregate { selector, sop: x } => {
                    let m = sel(selector);
                    let xs = sop(x);
                    let categorical = self.kind(x) == ValueKind::Categorical;
                    let row = |r: &Vec<bool>| -> Value {
                        let picked = xs.iter().zip(r).filter(|(_, &s)| s).map(|(v, _)| *v);
                        if categorical {
                            most_common(picked).unwrap_or_else(|| self.default_for(xs[0]))
                        } else {
                            mean(picked).unwrap_or(Value::Num(0.0))
                        }
                    };
                    Evaluated::Sop(m.iter().map(row).collect())
                }
                Node::SelectorWidth { selector } => {
                    let m = sel(selector);
                    Evaluated::Sop(m.iter().map(|r| Value::num(r.iter().filter(|&&s| s).count() as f64)).collect())
                }
                Node::Map { f, sop: x } => {
                    let xs = sop(x);
                    let ys = xs
                        .iter()
                        .map(|&v| f.apply(v).ok_or(EvalError::Partial { node: i, value: v }))
                        .collect::<Result<Vec<_>, _>>()?;
                    Evaluated::Sop(ys)
                }
                Node::SequenceMap { f, lhs, rhs } => {
                    let a = sop(lhs);
                    let b = sop(rhs);
                    let ys = a
                        .iter()
                        .zip(b)
                        .map(|(&x, &y)| f.apply(x, y).ok_or(EvalError::Partial { node: i, value: x }))
                        .collect::<Result<Vec<_>, _>>()?;
                    Evaluated::Sop(ys)
                }
            };
            if let Evaluated::Sop(vs) = &value {
                if vs.iter().any(|v| !v.is_finite()) {
                    return Err(EvalError::NonFinite { node: i });
                }
            }
            out.push(value);
        }
        Ok(out)
    }

    /// Output sequence of the program on `input`.
    pub fn run(&self, input: &[u8]) -> Result<Vec<Value>, EvalError> {
        match self.program.output() {
            Ref::Tokens => {
                self.check_input(input)?;
                Ok(input.iter().map(|&s| Value::Sym(s)).collect())
            }
            Ref::Indices => {
                self.check_input(input)?;
                Ok((0..input.len()).map(|i| Value::num(i as f64)).collect())
            }
            Ref::Node(i) => {
                let mut all = self.run_all(input)?;
                match all.swap_remove(i) {
                    Evaluated::Sop(v) => Ok(v),
                    Evaluated::Selector(_) => unreachable!("program output is a sequence"),
                }
            }
        }
    }

    fn kind(&self, r: Ref) -> ValueKind {
        match r {
            Ref::Tokens | Ref::Indices => ValueKind::Categorical,
            Ref::Node(j) => self.kinds[j].expect("sequence node"),
        }
    }

    fn default_for(&self, sample: Value) -> Value {
        default_value(sample.domain(), &self.config)
    }
}

fn sop_of<'a>(r: Ref, tokens: &'a [Value], indices: &'a [Value], out: &'a [Evaluated]) -> &'a [Value] {
    match r {
        Ref::Tokens => tokens,
        Ref::Indices => indices,
        Ref::Node(j) => out[j].as_sop().expect("well-typed program"),
    }
}

fn selector_of(r: Ref, out: &[Evaluated]) -> &[Vec<bool>] {
    match (r, r.node().map(|j| &out[j])) {
        (_, Some(Evaluated::Selector(m))) => m,
        _ => unreachable!("well-typed program"),
    }
}

/// Checks that `input` is a valid sequence for `cfg`.
pub fn check_input(cfg: &RaspConfig, input: &[u8]) -> Result<(), EvalError> {
    if input.is_empty() || input.len() > cfg.max_seq_len {
        return Err(EvalError::BadLength { len: input.len(), max: cfg.max_seq_len });
    }
    if let Some(&s) = input.iter().find(|&&s| s >= cfg.vocab_size) {
        return Err(EvalError::BadSymbol { symbol: s, vocab: cfg.vocab_size });
    }
    Ok(())
}

/// Result of an `Aggregate` whose selector row is empty.
pub fn default_value(domain: super::value::Domain, cfg: &RaspConfig) -> Value {
    use super::value::Domain;
    match domain {
        Domain::Sym => Value::Sym(cfg.default_symbol),
        Domain::Num => Value::Num(0.0),
        Domain::Bool => Value::Bool(false),
    }
}

/// Categorical averaging: the mean of one-hot vectors decoded by argmax, i.e.
/// the most frequent value with ties going to the smallest value.
pub fn most_common(values: impl Iterator<Item = Value>) -> Option<Value> {
    let mut counts: BTreeMap<Value, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    counts.into_iter().find(|&(_, c)| c == best).map(|(v, _)| v)
}

/// Numerical averaging, summing in position order.
pub fn mean(values: impl Iterator<Item = Value>) -> Option<Value> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v.as_f64().expect("numeric value");
        n += 1;
    }
    (n > 0).then(|| Value::num(sum / n as f64))
}

/// Runs `program` on `input`.
pub fn interpret(program: &Program, cfg: &RaspConfig, input: &[u8]) -> Result<Vec<Value>, EvalError> {
    Interpreter::new(program, cfg).run(input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rasp::{BinaryFn, Predicate, UnaryFn};

    fn sym(s: &str) -> Vec<u8> {
        s.bytes().map(|b| b - b'a').collect()
    }

    fn nums(xs: &[f64]) -> Vec<Value> {
        xs.iter().map(|&x| Value::num(x)).collect()
    }

    #[test]
    fn identity_program() {
        let p = Program::identity(crate::rasp::Primitive::Tokens);
        let out = interpret(&p, &RaspConfig::default(), &sym("abc")).unwrap();
        assert_eq!(out, vec![Value::Sym(0), Value::Sym(1), Value::Sym(2)]);
    }

    #[test]
    fn selector_width_of_token_equality() {
        let p = Program::new(vec![
            Node::Select { keys: Ref::Tokens, queries: Ref::Tokens, predicate: Predicate::Eq },
            Node::SelectorWidth { selector: Ref::Node(0) },
        ])
        .unwrap();
        let out = interpret(&p, &RaspConfig::default(), &sym("aab")).unwrap();
        assert_eq!(out, nums(&[2.0, 2.0, 1.0]));
    }

    #[test]
    fn mean_of_indicator_over_all_positions() {
        // Indicator of "index is zero" averaged over every position.
        let p = Program::new(vec![
            Node::Select { keys: Ref::Indices, queries: Ref::Indices, predicate: Predicate::True },
            Node::Map { f: UnaryFn::IsZero, sop: Ref::Indices },
            Node::Aggregate { selector: Ref::Node(0), sop: Ref::Node(1) },
        ])
        .unwrap();
        let out = interpret(&p, &RaspConfig::default(), &sym("abab")).unwrap();
        assert_eq!(out, nums(&[0.25; 4]));
    }

    #[test]
    fn mean_of_token_indicator() {
        // Fraction of positions holding the most frequent token; with a tie
        // between `a` and `b` the smaller symbol `a` wins, so on "abab" this
        // is the fraction of `a` tokens.
        let p = Program::new(vec![
            Node::Select { keys: Ref::Indices, queries: Ref::Indices, predicate: Predicate::True },
            Node::Aggregate { selector: Ref::Node(0), sop: Ref::Tokens },
            Node::SequenceMap { f: BinaryFn::Eq, lhs: Ref::Tokens, rhs: Ref::Node(1) },
            Node::Select { keys: Ref::Indices, queries: Ref::Indices, predicate: Predicate::True },
            Node::Aggregate { selector: Ref::Node(3), sop: Ref::Node(2) },
        ])
        .unwrap();
        let out = interpret(&p, &RaspConfig::default(), &sym("abab")).unwrap();
        assert_eq!(out, nums(&[0.5; 4]));
    }

    #[test]
    fn empty_selection_uses_default() {
        let p = Program::new(vec![
            Node::Select { keys: Ref::Indices, queries: Ref::Indices, predicate: Predicate::Lt },
            Node::Aggregate { selector: Ref::Node(0), sop: Ref::Tokens },
        ])
        .unwrap();
        // Position 0 selects nothing; later positions take the mode of the prefix.
        let out = interpret(&p, &RaspConfig { default_symbol: 4, ..Default::default() }, &sym("cbb")).unwrap();
        assert_eq!(out, vec![Value::Sym(4), Value::Sym(2), Value::Sym(1)]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = Program::identity(crate::rasp::Primitive::Tokens);
        let cfg = RaspConfig::default();
        assert!(matches!(interpret(&p, &cfg, &[]), Err(EvalError::BadLength { .. })));
        assert!(matches!(interpret(&p, &cfg, &[0; 9]), Err(EvalError::BadLength { .. })));
        assert!(matches!(interpret(&p, &cfg, &[5]), Err(EvalError::BadSymbol { .. })));
    }

    #[test]
    fn most_common_breaks_ties_low() {
        let v = [Value::Sym(3), Value::Sym(1), Value::Sym(3), Value::Sym(1)];
        assert_eq!(most_common(v.into_iter()), Some(Value::Sym(1)));
        assert_eq!(most_common(std::iter::empty()), None);
    }
}
