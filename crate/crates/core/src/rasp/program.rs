use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::lambda::{BinaryFn, Predicate, UnaryFn};
use super::value::Domain;

/// Input domain of compiled programs.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RaspConfig {
    /// Number of token symbols (`a`, `b`, ...).
    pub vocab_size: u8,
    pub max_seq_len: usize,
    /// Symbol produced by a categorical `Aggregate` over symbols when a
    /// query selects nothing.
    pub default_symbol: u8,
}

impl Default for RaspConfig {
    fn default() -> Self {
        RaspConfig { vocab_size: 5, max_seq_len: 8, default_symbol: 0 }
    }
}

impl RaspConfig {
    pub fn small(vocab_size: u8, max_seq_len: usize) -> Self {
        RaspConfig { vocab_size, max_seq_len, default_symbol: 0 }
    }

    /// Number of distinct valid inputs (all lengths `1..=max_seq_len`).
    pub fn input_space_size(&self) -> u128 {
        (1..=self.max_seq_len as u32)
            .map(|n| (self.vocab_size as u128).saturating_pow(n))
            .fold(0u128, |a, b| a.saturating_add(b))
    }
}

/// The input primitives every program starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Primitive {
    Tokens,
    Indices,
}

/// Reference to a sequence-valued (or selector-valued) expression.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ref {
    Tokens,
    Indices,
    /// Output of the node at this position in the program.
    Node(usize),
}

impl Ref {
    pub fn node(self) -> Option<usize> {
        match self {
            Ref::Node(i) => Some(i),
            _ => None,
        }
    }
}

impl From<Primitive> for Ref {
    fn from(p: Primitive) -> Ref {
        match p {
            Primitive::Tokens => Ref::Tokens,
            Primitive::Indices => Ref::Indices,
        }
    }
}

impl fmt::Display for Ref {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ref::Tokens => f.write_str("tokens"),
            Ref::Indices => f.write_str("indices"),
            Ref::Node(i) => write!(f, "var{}", i + 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Function {
    Select,
    Aggregate,
    SelectorWidth,
    Map,
    SequenceMap,
}

impl Function {
    pub const ALL: [Function; 5] =
        [Function::Select, Function::Aggregate, Function::SelectorWidth, Function::Map, Function::SequenceMap];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Function::Select => "Select",
            Function::Aggregate => "Aggregate",
            Function::SelectorWidth => "SelectorWidth",
            Function::Map => "Map",
            Function::SequenceMap => "SequenceMap",
        }
    }
}

/// One line of a program.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Node {
    Select { keys: Ref, queries: Ref, predicate: Predicate },
    Aggregate { selector: Ref, sop: Ref },
    SelectorWidth { selector: Ref },
    Map { f: UnaryFn, sop: Ref },
    SequenceMap { f: BinaryFn, lhs: Ref, rhs: Ref },
}

impl Node {
    pub fn function(&self) -> Function {
        match self {
            Node::Select { .. } => Function::Select,
            Node::Aggregate { .. } => Function::Aggregate,
            Node::SelectorWidth { .. } => Function::SelectorWidth,
            Node::Map { .. } => Function::Map,
            Node::SequenceMap { .. } => Function::SequenceMap,
        }
    }

    /// Referenced expressions, in argument order.
    pub fn inputs(&self) -> Vec<Ref> {
        match *self {
            Node::Select { keys, queries, .. } => vec![keys, queries],
            Node::Aggregate { selector, sop } => vec![selector, sop],
            Node::SelectorWidth { selector } => vec![selector],
            Node::Map { sop, .. } => vec![sop],
            Node::SequenceMap { lhs, rhs, .. } => vec![lhs, rhs],
        }
    }

    pub fn map_inputs(&self, mut f: impl FnMut(Ref) -> Ref) -> Node {
        match *self {
            Node::Select { keys, queries, predicate } => Node::Select { keys: f(keys), queries: f(queries), predicate },
            Node::Aggregate { selector, sop } => Node::Aggregate { selector: f(selector), sop: f(sop) },
            Node::SelectorWidth { selector } => Node::SelectorWidth { selector: f(selector) },
            Node::Map { f: g, sop } => Node::Map { f: g, sop: f(sop) },
            Node::SequenceMap { f: g, lhs, rhs } => Node::SequenceMap { f: g, lhs: f(lhs), rhs: f(rhs) },
        }
    }
}

/// Static type of an expression.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SopType {
    Selector,
    Sop(Domain),
}

impl fmt::Display for SopType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SopType::Selector => f.write_str("selector"),
            SopType::Sop(d) => write!(f, "{d} sequence"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TypeError {
    #[error("var{} references {reference}, which is not defined before it", node + 1)]
    ForwardReference { node: usize, reference: Ref },
    #[error("var{} argument {arg}: expected {expected}, found {found}", node + 1)]
    Mismatch { node: usize, arg: usize, expected: String, found: SopType },
    #[error("var{} is never used", node + 1)]
    UnusedNode { node: usize },
    #[error("program output must be a sequence, found {found}")]
    OutputNotSop { found: SopType },
    #[error("program output must be the last line")]
    OutputNotLast,
}

/// A topologically ordered RASP program whose output is its last node, or a
/// primitive when the program has no nodes.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Program {
    nodes: Vec<Node>,
    output: Ref,
}

impl Program {
    /// Builds a program whose output is its last node.
    pub fn new(nodes: Vec<Node>) -> Result<Program, TypeError> {
        let output = match nodes.len() {
            0 => Ref::Tokens,
            n => Ref::Node(n - 1),
        };
        Program::with_output(nodes, output)
    }

    pub fn with_output(nodes: Vec<Node>, output: Ref) -> Result<Program, TypeError> {
        let p = Program { nodes, output };
        p.check()?;
        Ok(p)
    }

    /// The zero-node program returning a primitive unchanged.
    pub fn identity(primitive: Primitive) -> Program {
        Program { nodes: Vec::new(), output: primitive.into() }
    }

    /// The first `last + 1` nodes of `p`, with node `last` as output. Skips
    /// validation: the prefix may end in a selector or leave nodes unused,
    /// which is fine for evaluating intermediate values.
    pub(crate) fn prefix(p: &Program, last: usize) -> Program {
        Program { nodes: p.nodes[..=last].to_vec(), output: Ref::Node(last) }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn output(&self) -> Ref {
        self.output
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn count(&self, function: Function) -> usize {
        self.nodes.iter().filter(|n| n.function() == function).count()
    }

    /// Static types of all nodes.
    pub fn types(&self) -> Vec<SopType> {
        node_types(&self.nodes).expect("program invariants checked on construction")
    }

    pub fn type_of(&self, r: Ref, types: &[SopType]) -> SopType {
        ref_type(r, types)
    }

    fn check(&self) -> Result<(), TypeError> {
        let types = node_types(&self.nodes)?;
        match self.output {
            Ref::Node(i) if i + 1 != self.nodes.len() => return Err(TypeError::OutputNotLast),
            Ref::Tokens | Ref::Indices if !self.nodes.is_empty() => return Err(TypeError::OutputNotLast),
            _ => {}
        }
        let out_ty = ref_type(self.output, &types);
        if out_ty == SopType::Selector {
            return Err(TypeError::OutputNotSop { found: out_ty });
        }
        let mut used = vec![false; self.nodes.len()];
        for node in &self.nodes {
            for r in node.inputs() {
                if let Ref::Node(j) = r {
                    used[j] = true;
                }
            }
        }
        if let Some(i) = (0..self.nodes.len().saturating_sub(1)).find(|&i| !used[i]) {
            return Err(TypeError::UnusedNode { node: i });
        }
        Ok(())
    }

    /// Reorders nodes into the post-order of a depth-first walk from the
    /// output (operands visited in argument order). Two programs that differ
    /// only in the order of independent lines canonicalize identically.
    pub fn canonicalize(&self) -> Program {
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut seen = vec![false; self.nodes.len()];
        fn visit(p: &Program, i: usize, seen: &mut [bool], order: &mut Vec<usize>) {
            if seen[i] {
                return;
            }
            seen[i] = true;
            for r in p.nodes[i].inputs() {
                if let Ref::Node(j) = r {
                    visit(p, j, seen, order);
                }
            }
            order.push(i);
        }
        if let Ref::Node(out) = self.output {
            visit(self, out, &mut seen, &mut order);
        }
        let mut new_index = vec![usize::MAX; self.nodes.len()];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new;
        }
        let remap = |r: Ref| match r {
            Ref::Node(j) => Ref::Node(new_index[j]),
            other => other,
        };
        let nodes = order.iter().map(|&old| self.nodes[old].map_inputs(remap)).collect();
        Program { nodes, output: remap(self.output) }
    }
}

fn ref_type(r: Ref, types: &[SopType]) -> SopType {
    match r {
        Ref::Tokens => SopType::Sop(Domain::Sym),
        Ref::Indices => SopType::Sop(Domain::Num),
        Ref::Node(i) => types[i],
    }
}

/// Type-checks a node list and returns the type of every node.
pub fn node_types(nodes: &[Node]) -> Result<Vec<SopType>, TypeError> {
    let mut types: Vec<SopType> = Vec::with_capacity(nodes.len());
    for (i, node) in nodes.iter().enumerate() {
        for r in node.inputs() {
            if let Ref::Node(j) = r {
                if j >= i {
                    return Err(TypeError::ForwardReference { node: i, reference: r });
                }
            }
        }
        let ty = |r: Ref| ref_type(r, &types);
        let mismatch = |arg: usize, expected: &str, found: SopType| TypeError::Mismatch {
            node: i,
            arg,
            expected: expected.to_string(),
            found,
        };
        let t = match *node {
            Node::Select { keys, queries, .. } => {
                let (SopType::Sop(kd), qt) = (ty(keys), ty(queries)) else {
                    return Err(mismatch(0, "sequence", ty(keys)));
                };
                if qt != SopType::Sop(kd) {
                    return Err(mismatch(1, &format!("{kd} sequence"), qt));
                }
                SopType::Selector
            }
            Node::Aggregate { selector, sop } => {
                if ty(selector) != SopType::Selector {
                    return Err(mismatch(0, "selector", ty(selector)));
                }
                match ty(sop) {
                    SopType::Sop(Domain::Bool) => SopType::Sop(Domain::Num),
                    SopType::Sop(d) => SopType::Sop(d),
                    found => return Err(mismatch(1, "sequence", found)),
                }
            }
            Node::SelectorWidth { selector } => {
                if ty(selector) != SopType::Selector {
                    return Err(mismatch(0, "selector", ty(selector)));
                }
                SopType::Sop(Domain::Num)
            }
            Node::Map { f, sop } => {
                if ty(sop) != SopType::Sop(f.input_domain()) {
                    return Err(mismatch(1, &format!("{} sequence", f.input_domain()), ty(sop)));
                }
                SopType::Sop(f.output_domain())
            }
            Node::SequenceMap { f, lhs, rhs } => {
                let d = match ty(lhs) {
                    SopType::Sop(d) if f.accepts(d) => d,
                    found => return Err(mismatch(1, "sequence accepted by the lambda", found)),
                };
                if ty(rhs) != SopType::Sop(d) {
                    return Err(mismatch(2, &format!("{d} sequence"), ty(rhs)));
                }
                SopType::Sop(f.output_domain())
            }
        };
        types.push(t);
    }
    Ok(types)
}
