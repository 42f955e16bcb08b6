//! Rejection sampling: static rules, a dynamic run on probe inputs, and a
//! full compile checked against the interpreter.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{check_budget, EncodeError};
use crate::compiler::{compile, CompileConfig, CompileError, CompiledTransformer};
use crate::probe::filter_probe;
use crate::rasp::{
    interpret, selector_shape_with, value_kinds, values_match, Function, Node, Program, RaspConfig, SpecError, Value,
    ValueKind,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RejectionCode {
    CompilerError,
    TooManySequenceMaps,
    TooLong,
    InvalidAggregate,
    RuntimeError,
    ValueSetOverflow,
    TokenBudgetExceeded,
}

impl RejectionCode {
    pub const ALL: [RejectionCode; 7] = [
        RejectionCode::CompilerError,
        RejectionCode::TooManySequenceMaps,
        RejectionCode::TooLong,
        RejectionCode::InvalidAggregate,
        RejectionCode::RuntimeError,
        RejectionCode::ValueSetOverflow,
        RejectionCode::TokenBudgetExceeded,
    ];

    /// Codes raised while compiling or encoding, as opposed to by the
    /// program-level rules.
    pub fn is_compiler_class(self) -> bool {
        matches!(
            self,
            RejectionCode::CompilerError | RejectionCode::ValueSetOverflow | RejectionCode::TokenBudgetExceeded
        )
    }
}

impl fmt::Display for RejectionCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionReason {
    pub code: RejectionCode,
    pub detail: String,
}

impl RejectionReason {
    fn new(code: RejectionCode, detail: impl Into<String>) -> Self {
        RejectionReason { code, detail: detail.into() }
    }
}

impl fmt::Display for RejectionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.detail)
    }
}

#[derive(Clone, Debug)]
pub struct FilterConfig {
    pub rasp: RaspConfig,
    pub compile: CompileConfig,
    pub max_sequence_maps: usize,
    pub max_lines: usize,
    pub probe: Vec<Vec<u8>>,
    /// Allowed gap between compiled and interpreted numerical outputs.
    pub tolerance: f64,
}

impl FilterConfig {
    pub fn new(rasp: RaspConfig) -> Self {
        FilterConfig {
            probe: filter_probe(&rasp),
            rasp,
            compile: CompileConfig::default(),
            max_sequence_maps: 2,
            max_lines: 15,
            tolerance: 1e-4,
        }
    }
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig::new(RaspConfig::default())
    }
}

/// Runs every check in order and returns the compiled transformer of an
/// accepted program.
pub fn check(p: &Program, cfg: &FilterConfig) -> Result<CompiledTransformer, RejectionReason> {
    let (t, expected) = check_compiles(p, cfg)?;
    for (x, want) in cfg.probe.iter().zip(&expected) {
        match t.forward(x) {
            Ok(got) if values_match(want, &got, cfg.tolerance) => {}
            Ok(got) => {
                return Err(RejectionReason::new(
                    RejectionCode::CompilerError,
                    format!("on {x:?} the compiled model returns {got:?} instead of {want:?}"),
                ))
            }
            Err(e) => return Err(RejectionReason::new(RejectionCode::CompilerError, e.to_string())),
        }
    }
    Ok(t)
}

/// Every check except comparing the compiled model with the interpreter.
/// Returns the transformer and the interpreter's outputs on the probe.
pub fn check_compiles(
    p: &Program,
    cfg: &FilterConfig,
) -> Result<(CompiledTransformer, Vec<Vec<Value>>), RejectionReason> {
    use RejectionCode::*;
    let maps = p.count(Function::SequenceMap);
    if maps > cfg.max_sequence_maps {
        return Err(RejectionReason::new(TooManySequenceMaps, format!("{maps} SequenceMap lines")));
    }
    if p.len() > cfg.max_lines {
        return Err(RejectionReason::new(TooLong, format!("{} lines", p.len())));
    }
    let kinds = value_kinds(p);
    for (i, node) in p.nodes().iter().enumerate() {
        if let Node::Aggregate { selector, .. } = *node {
            if kinds[i] != Some(ValueKind::Categorical)
                && !selector_shape_with(p, selector, &cfg.rasp, cfg.compile.infer.exhaustive_limit).width_at_most_one
            {
                return Err(RejectionReason::new(
                    InvalidAggregate,
                    format!("var{} averages over a selector that may select several positions", i + 1),
                ));
            }
        }
    }
    let mut expected = Vec::with_capacity(cfg.probe.len());
    for x in &cfg.probe {
        match interpret(p, &cfg.rasp, x) {
            Ok(v) => expected.push(v),
            Err(e) => return Err(RejectionReason::new(RuntimeError, format!("on {x:?}: {e}"))),
        }
    }
    let t = compile(p, &cfg.rasp, &cfg.compile).map_err(|e| match e {
        CompileError::Spec(SpecError::ValueSetOverflow { .. }) => RejectionReason::new(ValueSetOverflow, e.to_string()),
        e => RejectionReason::new(CompilerError, e.to_string()),
    })?;
    if let Err(e) = check_budget(&t) {
        let code = match e {
            EncodeError::TokenBudgetExceeded { .. } => TokenBudgetExceeded,
            _ => CompilerError,
        };
        return Err(RejectionReason::new(code, e.to_string()));
    }
    Ok((t, expected))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionHistogram(pub BTreeMap<RejectionCode, usize>);

impl RejectionHistogram {
    pub fn add(&mut self, code: RejectionCode) {
        *self.0.entry(code).or_default() += 1;
    }

    pub fn merge(&mut self, other: &RejectionHistogram) {
        for (&code, &n) in &other.0 {
            *self.0.entry(code).or_default() += n;
        }
    }

    pub fn total(&self) -> usize {
        self.0.values().sum()
    }

    pub fn get(&self, code: RejectionCode) -> usize {
        self.0.get(&code).copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, Default)]
pub struct FilterOutcome {
    /// Accepted programs in input order.
    pub accepted: Vec<(Program, CompiledTransformer)>,
    pub rejected: RejectionHistogram,
}

impl FilterOutcome {
    pub fn acceptance_rate(&self) -> f64 {
        let seen = self.accepted.len() + self.rejected.total();
        if seen == 0 {
            0.0
        } else {
            self.accepted.len() as f64 / seen as f64
        }
    }
}

/// Checks `programs` in parallel, keeping the input order of the accepted ones.
pub fn filter_stream(programs: Vec<Program>, cfg: &FilterConfig) -> FilterOutcome {
    let verdicts: Vec<_> = programs.into_par_iter().map(|p| (check(&p, cfg), p)).collect();
    let mut out = FilterOutcome::default();
    for (verdict, p) in verdicts {
        match verdict {
            Ok(t) => out.accepted.push((p, t)),
            Err(r) => out.rejected.add(r.code),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rasp::{parse, InferConfig};

    fn program(src: &str) -> Program {
        parse(src).unwrap()
    }

    fn code(src: &str, cfg: &FilterConfig) -> Option<RejectionCode> {
        check(&program(src), cfg).err().map(|r| r.code)
    }

    const GOOD: &str = "var1 = Select(tokens, tokens, EQ)\nvar2 = SelectorWidth(var1)\noutput = var2\n";

    #[test]
    fn accepts_a_simple_program() {
        assert_eq!(code(GOOD, &FilterConfig::default()), None);
    }

    #[test]
    fn three_sequence_maps() {
        let src = "var1 = SequenceMap(lambda x, y: x + y, indices, indices)\n\
                   var2 = SequenceMap(lambda x, y: x + y, var1, indices)\n\
                   var3 = SequenceMap(lambda x, y: x + y, var2, indices)\n\
                   output = var3\n";
        assert_eq!(code(src, &FilterConfig::default()), Some(RejectionCode::TooManySequenceMaps));
    }

    #[test]
    fn sixteen_lines() {
        let mut src = String::from("var1 = Map(lambda x: x + 1, indices)\n");
        for i in 2..=16 {
            src.push_str(&format!("var{i} = Map(lambda x: x + 1, var{})\n", i - 1));
        }
        src.push_str("output = var16\n");
        assert_eq!(code(&src, &FilterConfig::default()), Some(RejectionCode::TooLong));
    }

    #[test]
    fn numerical_mean_under_true_selector() {
        let src = "var1 = Select(tokens, tokens, TRUE)\n\
                   var2 = Map(lambda x: x > 0, indices)\n\
                   var3 = Aggregate(var1, var2)\n\
                   output = var3\n";
        assert_eq!(code(src, &FilterConfig::default()), Some(RejectionCode::InvalidAggregate));
    }

    #[test]
    fn tiny_value_set_cap() {
        let mut cfg = FilterConfig::default();
        cfg.compile.infer = InferConfig { value_set_cap: 2, ..cfg.compile.infer };
        let c = code(GOOD, &cfg).unwrap();
        assert_eq!(c, RejectionCode::ValueSetOverflow);
        assert!(c.is_compiler_class());
    }

    #[test]
    fn sequence_map_over_numbers_is_a_compiler_error() {
        let src = "var1 = Select(indices, indices, EQ)\n\
                   var2 = Map(lambda x: x == 0, indices)\n\
                   var3 = Aggregate(var1, var2)\n\
                   var4 = SequenceMap(lambda x, y: x + y, var3, var3)\n\
                   output = var4\n";
        assert_eq!(code(src, &FilterConfig::default()), Some(RejectionCode::CompilerError));
    }

    #[test]
    fn stream_keeps_order_and_counts() {
        let bad = program("var1 = Select(tokens, tokens, TRUE)\nvar2 = Map(lambda x: x > 0, indices)\nvar3 = Aggregate(var1, var2)\noutput = var3\n");
        let a = program(GOOD);
        let b = program("var1 = Map(lambda x: x - 1, indices)\noutput = var1\n");
        let out = filter_stream(vec![a.clone(), bad, b.clone(), a.clone()], &FilterConfig::default());
        let kept: Vec<_> = out.accepted.iter().map(|(p, _)| p.clone()).collect();
        assert_eq!(kept, vec![a.clone(), b, a]);
        assert_eq!(out.rejected.0, BTreeMap::from([(RejectionCode::InvalidAggregate, 1)]));
        assert_eq!(out.acceptance_rate(), 0.75);

        let empty = filter_stream(Vec::new(), &FilterConfig::default());
        assert!(empty.accepted.is_empty() && empty.rejected.total() == 0);
    }

    #[test]
    fn check_is_deterministic() {
        let p = program(GOOD);
        let cfg = FilterConfig::default();
        assert_eq!(check(&p, &cfg).unwrap(), check(&p, &cfg).unwrap());
    }
}
