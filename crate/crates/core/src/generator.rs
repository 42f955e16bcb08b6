//! Random program generation from a pool of available inputs.
//!
//! The pool starts as `[tokens, indices]`. Each step draws a function by
//! weight, fills its parameters from type-compatible pool entries and adds the
//! new node to the pool. Once the pool holds more than `phase0_duration`
//! entries beyond the initial two, consumed entries are removed after every
//! step, so the pool shrinks until a single sequence remains: the output.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rasp::{BinaryFn, Domain, Function, Node, Predicate, Program, Ref, SopType, UnaryFn};

/// Lowest weight `fit_weights` assigns to any function.
pub const WEIGHT_FLOOR: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Indexed like [`Function::ALL`].
    pub function_weights: [f64; 5],
    pub phase0_duration: usize,
    /// An attempt that converges with fewer nodes is discarded.
    pub min_lines: usize,
    /// An attempt that reaches this many nodes without converging is
    /// discarded. This also bounds phase 1 well below `10 * max_lines`
    /// stalled attempts.
    pub max_lines: usize,
    pub seed: u64,
    pub max_restarts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            // Select, Aggregate, SelectorWidth, Map, SequenceMap.
            function_weights: [0.28, 0.22, 0.14, 0.22, 0.14],
            phase0_duration: 0,
            min_lines: 5,
            max_lines: 15,
            seed: 0,
            max_restarts: 100,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("no program converged within {restarts} restarts")]
    RestartBudgetExceeded { restarts: usize },
    #[error("corpus has no nodes to count")]
    EmptyCorpus,
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let sum: f64 = self.function_weights.iter().sum();
        if self.function_weights.iter().any(|&w| w.is_nan() || w <= 0.0) {
            return Err(GenError::InvalidConfig("function weights must be positive".into()));
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(GenError::InvalidConfig(format!("function weights sum to {sum}, not 1")));
        }
        if self.min_lines < 1 || self.min_lines > self.max_lines {
            return Err(GenError::InvalidConfig("need 1 <= min_lines <= max_lines".into()));
        }
        Ok(())
    }
}

/// What happened while generating one program.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenTelemetry {
    pub restarts: usize,
    /// Nodes emitted before switching to phase 1 (in the successful attempt).
    pub phase0_len: usize,
    pub nodes: usize,
    /// Largest number of non-primitive pool entries seen at any point.
    pub max_pool_nodes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Entry {
    r: Ref,
    ty: SopType,
}

enum Attempt {
    Done(Program, GenTelemetry),
    Restart,
}

/// Generates one program with an RNG seeded from `cfg.seed`.
pub fn generate(cfg: &GenConfig) -> Result<(Program, GenTelemetry), GenError> {
    generate_with(cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

/// Generates the `index`-th program of the stream determined by `cfg.seed`.
/// Every index has its own RNG stream, so programs can be produced in any
/// order or in parallel.
pub fn generate_nth(cfg: &GenConfig, index: u64) -> Result<(Program, GenTelemetry), GenError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    generate_with(cfg, &mut rng)
}

pub fn generate_with<R: Rng>(cfg: &GenConfig, rng: &mut R) -> Result<(Program, GenTelemetry), GenError> {
    cfg.validate()?;
    for restarts in 0..=cfg.max_restarts {
        if let Attempt::Done(p, mut t) = attempt(cfg, rng) {
            t.restarts = restarts;
            return Ok((p, t));
        }
    }
    Err(GenError::RestartBudgetExceeded { restarts: cfg.max_restarts })
}

fn attempt<R: Rng>(cfg: &GenConfig, rng: &mut R) -> Attempt {
    let mut pool = vec![
        Entry { r: Ref::Tokens, ty: SopType::Sop(Domain::Sym) },
        Entry { r: Ref::Indices, ty: SopType::Sop(Domain::Num) },
    ];
    let mut nodes: Vec<Node> = Vec::new();
    let mut phase = 0;
    let mut telemetry = GenTelemetry::default();
    loop {
        if phase == 1 && pool.len() == 1 && matches!(pool[0].ty, SopType::Sop(_)) {
            break;
        }
        if nodes.len() >= cfg.max_lines {
            return Attempt::Restart;
        }
        let Some(node) = sample_node(cfg, &pool, rng) else {
            return Attempt::Restart;
        };
        let ty = output_type(&node, &pool);
        let r = Ref::Node(nodes.len());
        nodes.push(node);
        pool.push(Entry { r, ty });
        telemetry.max_pool_nodes = telemetry.max_pool_nodes.max(pool.iter().filter(|e| e.r.node().is_some()).count());
        if phase == 0 && pool.len() - 2 > cfg.phase0_duration {
            phase = 1;
            telemetry.phase0_len = nodes.len();
        }
        if phase == 1 {
            for used in node.inputs() {
                if let Some(pos) = pool.iter().position(|e| e.r == used) {
                    pool.remove(pos);
                }
            }
        }
    }
    if nodes.len() < cfg.min_lines {
        return Attempt::Restart;
    }
    telemetry.nodes = nodes.len();
    let p = Program::new(nodes).expect("converged pool yields a valid program");
    Attempt::Done(p, telemetry)
}

fn output_type(node: &Node, pool: &[Entry]) -> SopType {
    match *node {
        Node::Select { .. } => SopType::Selector,
        Node::Aggregate { sop, .. } => match pool.iter().find(|e| e.r == sop).map(|e| e.ty) {
            Some(SopType::Sop(Domain::Bool)) => SopType::Sop(Domain::Num),
            Some(t) => t,
            None => unreachable!("operand drawn from the pool"),
        },
        Node::SelectorWidth { .. } => SopType::Sop(Domain::Num),
        Node::Map { f, .. } => SopType::Sop(f.output_domain()),
        Node::SequenceMap { f, .. } => SopType::Sop(f.output_domain()),
    }
}

/// Draws functions by weight without replacement until one can be filled
/// from the pool; `None` when no function is compatible.
fn sample_node<R: Rng>(cfg: &GenConfig, pool: &[Entry], rng: &mut R) -> Option<Node> {
    let mut weights = cfg.function_weights;
    loop {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let mut x = rng.random::<f64>() * total;
        let mut pick = weights.iter().rposition(|&w| w > 0.0).unwrap();
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 && x < w {
                pick = i;
                break;
            }
            x -= w;
        }
        if let Some(node) = fill(Function::ALL[pick], pool, rng) {
            return Some(node);
        }
        weights[pick] = 0.0;
    }
}

fn fill<R: Rng>(function: Function, pool: &[Entry], rng: &mut R) -> Option<Node> {
    let pick = |rng: &mut R, pred: &dyn Fn(SopType) -> bool| -> Option<Ref> {
        let c: Vec<Ref> = pool.iter().filter(|e| pred(e.ty)).map(|e| e.r).collect();
        c.choose(rng).copied()
    };
    let domain_of = |r: Ref| match pool.iter().find(|e| e.r == r).map(|e| e.ty) {
        Some(SopType::Sop(d)) => d,
        _ => unreachable!("sequence entry"),
    };
    let is_sop = |t: SopType| matches!(t, SopType::Sop(_));
    let is_sel = |t: SopType| t == SopType::Selector;
    Some(match function {
        Function::Select => {
            let keys = pick(rng, &is_sop)?;
            let d = domain_of(keys);
            let queries = pick(rng, &|t| t == SopType::Sop(d))?;
            let predicate = *Predicate::ALL.choose(rng).unwrap();
            Node::Select { keys, queries, predicate }
        }
        Function::Aggregate => {
            let selector = pick(rng, &is_sel)?;
            let sop = pick(rng, &is_sop)?;
            Node::Aggregate { selector, sop }
        }
        Function::SelectorWidth => Node::SelectorWidth { selector: pick(rng, &is_sel)? },
        Function::Map => {
            let sop = pick(rng, &|t| t == SopType::Sop(Domain::Num))?;
            let f = *UnaryFn::ALL.choose(rng).unwrap();
            Node::Map { f, sop }
        }
        Function::SequenceMap => {
            let lhs = pick(rng, &|t| matches!(t, SopType::Sop(d) if BinaryFn::ALL.iter().any(|f| f.accepts(d))))?;
            let d = domain_of(lhs);
            let lambdas: Vec<BinaryFn> = BinaryFn::ALL.into_iter().filter(|f| f.accepts(d)).collect();
            let f = *lambdas.choose(rng).unwrap();
            let rhs = pick(rng, &|t| t == SopType::Sop(d))?;
            Node::SequenceMap { f, lhs, rhs }
        }
    })
}

/// Relative function frequencies over all nodes of `corpus`, floored at
/// [`WEIGHT_FLOOR`] and renormalized. Floored entries stay exactly at the
/// floor; the rest share the remaining mass in proportion to their counts.
pub fn fit_weights(corpus: &[Program]) -> Result<[f64; 5], GenError> {
    let mut counts = [0usize; 5];
    for p in corpus {
        for n in p.nodes() {
            counts[n.function().index()] += 1;
        }
    }
    if counts.iter().sum::<usize>() == 0 {
        return Err(GenError::EmptyCorpus);
    }
    let mut floored = [false; 5];
    loop {
        let free_mass = 1.0 - WEIGHT_FLOOR * floored.iter().filter(|&&f| f).count() as f64;
        let free_count: usize = (0..5).filter(|&i| !floored[i]).map(|i| counts[i]).sum();
        let weights: [f64; 5] = std::array::from_fn(|i| {
            if floored[i] {
                WEIGHT_FLOOR
            } else {
                free_mass * counts[i] as f64 / free_count as f64
            }
        });
        let newly: Vec<usize> = (0..5).filter(|&i| !floored[i] && weights[i] < WEIGHT_FLOOR).collect();
        if newly.is_empty() {
            return Ok(weights);
        }
        for i in newly {
            floored[i] = true;
        }
    }
}
