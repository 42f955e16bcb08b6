//! Static per-node information: encoding kind and finite value sets.
//!
//! Value sets come from forward propagation of finite sets through each node.
//! The transfer functions are sound; when the whole input space is small
//! enough to enumerate (see [`InferConfig::exhaustive_limit`]) they are
//! replaced by the exact reachable sets.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::interp::{default_value, EvalError, Evaluated, Interpreter};
use super::lambda::Predicate;
use super::program::{Node, Program, RaspConfig, Ref, SopType};
use super::value::{Domain, Value};

/// How a sequence is laid out in the residual stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ValueKind {
    /// One-hot over the value set.
    Categorical,
    /// A single real-valued dimension.
    Numerical,
    /// A single 0/1 dimension.
    Boolean,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SOpSpec {
    pub kind: ValueKind,
    /// Sorted, duplicate-free.
    pub values: Vec<Value>,
}

impl SOpSpec {
    pub fn domain(&self) -> Option<Domain> {
        self.values.first().map(Value::domain)
    }

    pub fn position(&self, v: &Value) -> Option<usize> {
        self.values.binary_search(v).ok()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgramSpecs {
    pub tokens: SOpSpec,
    pub indices: SOpSpec,
    /// `None` for selector nodes.
    pub nodes: Vec<Option<SOpSpec>>,
}

impl ProgramSpecs {
    pub fn get(&self, r: Ref) -> Option<&SOpSpec> {
        match r {
            Ref::Tokens => Some(&self.tokens),
            Ref::Indices => Some(&self.indices),
            Ref::Node(i) => self.nodes[i].as_ref(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferConfig {
    /// Largest value set any node may have.
    pub value_set_cap: usize,
    /// Enumerate every input when the input space has at most this many
    /// sequences.
    pub exhaustive_limit: u128,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { value_set_cap: 64, exhaustive_limit: 4096 }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SpecError {
    #[error("var{} has more than {cap} possible values", node + 1)]
    ValueSetOverflow { node: usize, cap: usize },
    #[error("var{} can produce a non-finite value", node + 1)]
    NonFinite { node: usize },
}

/// Encoding kind of every node (`None` for selectors). Purely structural.
pub fn value_kinds(p: &Program) -> Vec<Option<ValueKind>> {
    let mut kinds: Vec<Option<ValueKind>> = Vec::with_capacity(p.len());
    let kind_of = |r: Ref, kinds: &[Option<ValueKind>]| match r {
        Ref::Tokens | Ref::Indices => ValueKind::Categorical,
        Ref::Node(j) => kinds[j].expect("sequence operand"),
    };
    for node in p.nodes() {
        let k = match *node {
            Node::Select { .. } => None,
            Node::Map { f, sop } => {
                Some(if f.output_domain() == Domain::Bool { ValueKind::Boolean } else { kind_of(sop, &kinds) })
            }
            Node::SequenceMap { f, lhs, rhs } => Some(if f.output_domain() == Domain::Bool {
                ValueKind::Boolean
            } else if kind_of(lhs, &kinds) == ValueKind::Numerical || kind_of(rhs, &kinds) == ValueKind::Numerical {
                ValueKind::Numerical
            } else {
                ValueKind::Categorical
            }),
            Node::Aggregate { sop, .. } => Some(match kind_of(sop, &kinds) {
                ValueKind::Categorical => ValueKind::Categorical,
                _ => ValueKind::Numerical,
            }),
            Node::SelectorWidth { .. } => Some(ValueKind::Categorical),
        };
        kinds.push(k);
    }
    kinds
}

/// Infers kinds and value sets with the default limits.
pub fn infer_specs(p: &Program, cfg: &RaspConfig) -> Result<ProgramSpecs, SpecError> {
    infer_specs_with(p, cfg, &InferConfig::default())
}

pub fn infer_specs_with(p: &Program, cfg: &RaspConfig, limits: &InferConfig) -> Result<ProgramSpecs, SpecError> {
    let kinds = value_kinds(p);
    let sets = if cfg.input_space_size() <= limits.exhaustive_limit {
        exhaustive_sets(p, cfg)?
    } else {
        static_sets(p, cfg, limits.value_set_cap)?
    };
    let mut nodes = Vec::with_capacity(p.len());
    for (i, (kind, set)) in kinds.iter().zip(sets).enumerate() {
        match (kind, set) {
            (Some(kind), Some(set)) => {
                if set.len() > limits.value_set_cap {
                    return Err(SpecError::ValueSetOverflow { node: i, cap: limits.value_set_cap });
                }
                if set.iter().any(|v| !v.is_finite()) {
                    return Err(SpecError::NonFinite { node: i });
                }
                nodes.push(Some(SOpSpec { kind: *kind, values: set.into_iter().collect() }));
            }
            _ => nodes.push(None),
        }
    }
    Ok(ProgramSpecs { tokens: tokens_spec(cfg), indices: indices_spec(cfg), nodes })
}

fn tokens_spec(cfg: &RaspConfig) -> SOpSpec {
    SOpSpec { kind: ValueKind::Categorical, values: (0..cfg.vocab_size).map(Value::Sym).collect() }
}

fn indices_spec(cfg: &RaspConfig) -> SOpSpec {
    SOpSpec { kind: ValueKind::Categorical, values: (0..cfg.max_seq_len).map(|i| Value::num(i as f64)).collect() }
}

/// Every valid input sequence, shortest first, lexicographic within a length.
pub fn all_inputs(cfg: &RaspConfig) -> impl Iterator<Item = Vec<u8>> + '_ {
    (1..=cfg.max_seq_len).flat_map(move |len| {
        let total = (cfg.vocab_size as u64).pow(len as u32);
        (0..total).map(move |mut code| {
            let mut seq = vec![0u8; len];
            for slot in seq.iter_mut().rev() {
                *slot = (code % cfg.vocab_size as u64) as u8;
                code /= cfg.vocab_size as u64;
            }
            seq
        })
    })
}

fn exhaustive_sets(p: &Program, cfg: &RaspConfig) -> Result<Vec<Option<BTreeSet<Value>>>, SpecError> {
    let mut sets: Vec<Option<BTreeSet<Value>>> = p
        .types()
        .iter()
        .map(|t| match t {
            SopType::Selector => None,
            SopType::Sop(_) => Some(BTreeSet::new()),
        })
        .collect();
    let interp = Interpreter::new(p, cfg);
    for input in all_inputs(cfg) {
        let all = match interp.run_all(&input) {
            Ok(all) => all,
            Err(EvalError::NonFinite { node }) => return Err(SpecError::NonFinite { node }),
            Err(e) => unreachable!("enumerated inputs are valid: {e}"),
        };
        for (set, value) in sets.iter_mut().zip(all) {
            if let (Some(set), Evaluated::Sop(vs)) = (set, value) {
                set.extend(vs);
            }
        }
    }
    Ok(sets)
}

fn static_sets(p: &Program, cfg: &RaspConfig, cap: usize) -> Result<Vec<Option<BTreeSet<Value>>>, SpecError> {
    let kinds = value_kinds(p);
    let tokens: BTreeSet<Value> = tokens_spec(cfg).values.into_iter().collect();
    let indices: BTreeSet<Value> = indices_spec(cfg).values.into_iter().collect();
    let mut sets: Vec<Option<BTreeSet<Value>>> = Vec::with_capacity(p.len());
    for (i, node) in p.nodes().iter().enumerate() {
        let get = |r: Ref| -> &BTreeSet<Value> {
            match r {
                Ref::Tokens => &tokens,
                Ref::Indices => &indices,
                Ref::Node(j) => sets[j].as_ref().expect("sequence operand"),
            }
        };
        let overflow = SpecError::ValueSetOverflow { node: i, cap };
        let set = match *node {
            Node::Select { .. } => None,
            Node::Map { f, sop } => Some(get(sop).iter().filter_map(|&v| f.apply(v)).collect()),
            Node::SequenceMap { f, lhs, rhs } => {
                let (a, b) = (get(lhs), get(rhs));
                if lhs == rhs {
                    Some(a.iter().filter_map(|&v| f.apply(v, v)).collect())
                } else {
                    Some(a.iter().flat_map(|&x| b.iter().filter_map(move |&y| f.apply(x, y))).collect())
                }
            }
            Node::SelectorWidth { selector } => {
                let sel = selector_shape(p, selector, cfg);
                let lo = usize::from(sel.never_empty);
                let hi = if sel.width_at_most_one { 1 } else { cfg.max_seq_len };
                Some((lo..=hi).map(|w| Value::num(w as f64)).collect())
            }
            Node::Aggregate { selector, sop } => {
                let sel = selector_shape(p, selector, cfg);
                let xs = get(sop);
                let domain = xs.iter().next().map(Value::domain).unwrap_or(Domain::Num);
                let categorical = kinds[i] == Some(ValueKind::Categorical);
                let mut out: BTreeSet<Value> = if categorical {
                    xs.clone()
                } else if sel.width_at_most_one {
                    xs.iter().map(|v| Value::num(v.as_f64().expect("numeric"))).collect()
                } else {
                    mean_closure(xs, cfg.max_seq_len, cap).ok_or(overflow.clone())?
                };
                if !sel.never_empty {
                    let d = if categorical { domain } else { Domain::Num };
                    out.insert(default_value(d, cfg));
                }
                Some(out)
            }
        };
        if let Some(s) = &set {
            if s.len() > cap {
                return Err(overflow);
            }
        }
        sets.push(set);
    }
    Ok(sets)
}

/// All means of multisets of size `1..=max_len` drawn from `xs`, or `None`
/// once more than `cap` distinct means appear.
fn mean_closure(xs: &BTreeSet<Value>, max_len: usize, cap: usize) -> Option<BTreeSet<Value>> {
    let base: Vec<f64> = xs.iter().filter_map(Value::as_f64).collect();
    let mut sums: BTreeSet<u64> = base.iter().map(|x| x.to_bits()).collect();
    let mut out: BTreeSet<Value> = base.iter().map(|&x| Value::num(x)).collect();
    for k in 2..=max_len {
        let next: BTreeSet<u64> =
            sums.iter().flat_map(|&s| base.iter().map(move |&x| (f64::from_bits(s) + x).to_bits())).collect();
        for &s in &next {
            out.insert(Value::num(f64::from_bits(s) / k as f64));
            if out.len() > cap {
                return None;
            }
        }
        sums = next;
    }
    Some(out)
}

/// Static facts about a selector's row widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelectorShape {
    /// Every query selects at least one key.
    pub never_empty: bool,
    /// No query ever selects more than one key.
    pub width_at_most_one: bool,
}

/// Shape of the selector produced by `selector` (a `Select` node).
///
/// A row can hold at most one key when the predicate is `EQ` and the keys are
/// injective in the position (indices, or indices pushed through injective
/// maps). Rows are never empty when the predicate is `TRUE`, or reflexive with
/// keys and queries being the same expression. On enumerable input spaces the
/// width bound is decided by brute force instead.
pub fn selector_shape(p: &Program, selector: Ref, cfg: &RaspConfig) -> SelectorShape {
    selector_shape_with(p, selector, cfg, InferConfig::default().exhaustive_limit)
}

pub fn selector_shape_with(p: &Program, selector: Ref, cfg: &RaspConfig, exhaustive_limit: u128) -> SelectorShape {
    let Some(Node::Select { keys, queries, predicate }) = selector.node().map(|i| p.nodes()[i]) else {
        panic!("selector_shape called on a non-selector reference");
    };
    let never_empty = predicate == Predicate::True || (keys == queries && predicate.is_reflexive());
    let static_narrow = predicate == Predicate::Eq && position_injective(p, keys, cfg);
    let width_at_most_one =
        static_narrow || (cfg.input_space_size() <= exhaustive_limit && brute_force_max_width(p, selector, cfg) <= 1);
    SelectorShape { never_empty, width_at_most_one }
}

fn brute_force_max_width(p: &Program, selector: Ref, cfg: &RaspConfig) -> usize {
    let idx = selector.node().expect("selector node");
    // Only the prefix up to the selector is evaluated.
    let prefix = Program::prefix(p, idx);
    let interp = Interpreter::new(&prefix, cfg);
    all_inputs(cfg)
        .filter_map(|input| interp.run_all(&input).ok())
        .map(|all| match &all[idx] {
            Evaluated::Selector(m) => m.iter().map(|r| r.iter().filter(|&&s| s).count()).max().unwrap_or(0),
            Evaluated::Sop(_) => 0,
        })
        .max()
        .unwrap_or(0)
}

/// Whether the sequence `r` holds pairwise distinct values at distinct
/// positions on every input.
pub fn position_injective(p: &Program, r: Ref, cfg: &RaspConfig) -> bool {
    chain_values(p, r, cfg).is_some()
}

/// For a chain `indices -> Map -> Map ...` of injective maps, the values the
/// chain can take; `None` when `r` is not such a chain.
fn chain_values(p: &Program, r: Ref, cfg: &RaspConfig) -> Option<Vec<Value>> {
    match r {
        Ref::Indices => Some((0..cfg.max_seq_len).map(|i| Value::num(i as f64)).collect()),
        Ref::Tokens => None,
        Ref::Node(i) => match p.nodes()[i] {
            Node::Map { f, sop } => {
                let xs = chain_values(p, sop, cfg)?;
                let ys: Vec<Value> = xs.iter().filter_map(|&v| f.apply(v)).collect();
                let distinct: BTreeSet<Value> = ys.iter().copied().collect();
                (distinct.len() == xs.len()).then_some(ys)
            }
            _ => None,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rasp::{BinaryFn, UnaryFn};

    fn nums(xs: &[f64]) -> Vec<Value> {
        xs.iter().map(|&x| Value::num(x)).collect()
    }

    fn static_only() -> InferConfig {
        InferConfig { exhaustive_limit: 0, ..Default::default() }
    }

    #[test]
    fn primitives() {
        let p = Program::new(vec![Node::Map { f: UnaryFn::Inc, sop: Ref::Indices }]).unwrap();
        let specs = infer_specs(&p, &RaspConfig::default()).unwrap();
        assert_eq!(specs.indices.values, nums(&[0., 1., 2., 3., 4., 5., 6., 7.]));
        assert_eq!(specs.tokens.values.len(), 5);
    }

    #[test]
    fn map_inc_over_indices() {
        let p = Program::new(vec![Node::Map { f: UnaryFn::Inc, sop: Ref::Indices }]).unwrap();
        let cfg = RaspConfig::small(5, 4);
        for limits in [static_only(), InferConfig::default()] {
            let specs = infer_specs_with(&p, &cfg, &limits).unwrap();
            assert_eq!(specs.nodes[0].as_ref().unwrap().values, nums(&[1., 2., 3., 4.]));
        }
    }

    #[test]
    fn selector_width_bounds() {
        let p = Program::new(vec![
            Node::Select { keys: Ref::Tokens, queries: Ref::Tokens, predicate: Predicate::Lt },
            Node::SelectorWidth { selector: Ref::Node(0) },
        ])
        .unwrap();
        let specs = infer_specs(&p, &RaspConfig::default()).unwrap();
        let w = &specs.nodes[1].as_ref().unwrap().values;
        assert!(w.iter().all(|v| v.as_f64().unwrap() <= 8.0 && v.as_f64().unwrap() >= 0.0));
        assert_eq!(specs.nodes[1].as_ref().unwrap().kind, ValueKind::Categorical);
    }

    #[test]
    fn kinds_follow_structure() {
        let p = Program::new(vec![
            Node::Select { keys: Ref::Indices, queries: Ref::Indices, predicate: Predicate::Eq },
            Node::Map { f: UnaryFn::IsPositive, sop: Ref::Indices },
            Node::Aggregate { selector: Ref::Node(0), sop: Ref::Node(1) },
            Node::Map { f: UnaryFn::Double, sop: Ref::Node(2) },
            Node::SequenceMap { f: BinaryFn::Add, lhs: Ref::Node(3), rhs: Ref::Indices },
        ])
        .unwrap();
        assert_eq!(
            value_kinds(&p),
            vec![
                None,
                Some(ValueKind::Boolean),
                Some(ValueKind::Numerical),
                Some(ValueKind::Numerical),
                Some(ValueKind::Numerical)
            ]
        );
    }

    #[test]
    fn narrow_selector_shapes() {
        let p = Program::new(vec![
            Node::Map { f: UnaryFn::Inc, sop: Ref::Indices },
            Node::Select { keys: Ref::Node(0), queries: Ref::Indices, predicate: Predicate::Eq },
            Node::Aggregate { selector: Ref::Node(1), sop: Ref::Tokens },
        ])
        .unwrap();
        let cfg = RaspConfig::default();
        let shape = selector_shape(&p, Ref::Node(1), &cfg);
        assert!(shape.width_at_most_one);
        assert!(!shape.never_empty);
        // abs is not injective in general but is on non-negative indices.
        assert!(position_injective(&p, Ref::Node(0), &cfg));
    }

    #[test]
    fn static_overflow_is_reported() {
        let p = Program::new(vec![
            Node::SequenceMap { f: BinaryFn::Mul, lhs: Ref::Indices, rhs: Ref::Indices },
            Node::SequenceMap { f: BinaryFn::Add, lhs: Ref::Node(0), rhs: Ref::Indices },
        ])
        .unwrap();
        let limits = InferConfig { value_set_cap: 4, exhaustive_limit: 0 };
        assert!(matches!(
            infer_specs_with(&p, &RaspConfig::default(), &limits),
            Err(SpecError::ValueSetOverflow { .. })
        ));
    }

    #[test]
    fn all_inputs_counts() {
        let cfg = RaspConfig::small(3, 4);
        assert_eq!(all_inputs(&cfg).count() as u128, cfg.input_space_size());
        assert_eq!(cfg.input_space_size(), 3 + 9 + 27 + 81);
    }
}
