//! Scores predicted program token streams against ground truth programs.
//!
//! Predicted streams are cut to their body first: a leading BOS is dropped
//! and everything from the first EOS or PAD on is ignored. Token accuracy is
//! positional over the truth length, so surplus predicted tokens do not lower
//! it but do rule out sequence equality.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{decode_program, encode_program, DecodeError, EncodeError, BOS, EOS, PAD};
use crate::filters::{check, FilterConfig, RejectionReason};
use crate::probe::function_probe;
use crate::rasp::{interpret, values_match, Program, Value};

/// Tolerance on numerical outputs when comparing functions.
pub const FUNCTIONAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("the ground truth has no tokens")]
    EmptyTruth,
    #[error("the ground truth cannot be encoded: {0}")]
    Unencodable(#[from] EncodeError),
}

/// The tokens of `stream` that describe program lines.
pub fn program_body(stream: &[u32]) -> &[u32] {
    let s = stream.strip_prefix(&[BOS]).unwrap_or(stream);
    let end = s.iter().position(|&t| t == EOS || t == PAD).unwrap_or(s.len());
    &s[..end]
}

/// Share of truth positions where `pred` holds the same token.
pub fn token_accuracy(pred: &[u32], truth: &[u32]) -> Result<f64, MetricError> {
    if truth.is_empty() {
        return Err(MetricError::EmptyTruth);
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub token_accuracy: f64,
    pub sequence_equal: bool,
    pub compilable: bool,
    /// `None` when the prediction is not compilable.
    pub functionally_equivalent: Option<bool>,
    /// Truth length in tokens.
    pub n_tokens: usize,
    pub decode_error: Option<DecodeError>,
    pub rejection: Option<RejectionReason>,
}

impl EvalReport {
    /// The implications every report satisfies.
    pub fn is_consistent(&self) -> bool {
        (0.0..=1.0).contains(&self.token_accuracy)
            && (!self.sequence_equal || self.token_accuracy == 1.0)
            && (self.compilable || self.functionally_equivalent.is_none())
            && (!self.sequence_equal || (self.compilable && self.functionally_equivalent == Some(true)))
    }
}

/// Shared inputs of an evaluation run.
#[derive(Clone, Debug)]
pub struct EvalContext {
    pub filter: FilterConfig,
    pub probe: Vec<Vec<u8>>,
    pub tolerance: f64,
}

impl Default for EvalContext {
    fn default() -> Self {
        let filter = FilterConfig::default();
        EvalContext { probe: function_probe(&filter.rasp), filter, tolerance: FUNCTIONAL_TOLERANCE }
    }
}

impl EvalContext {
    fn outputs(&self, p: &Program) -> Option<Vec<Vec<Value>>> {
        self.probe.iter().map(|x| interpret(p, &self.filter.rasp, x).ok()).collect()
    }

    /// Whether `a` and `b` agree on every probe input.
    pub fn equivalent(&self, a: &Program, b: &Program) -> bool {
        match (self.outputs(a), self.outputs(b)) {
            (Some(x), Some(y)) => x.iter().zip(&y).all(|(u, v)| values_match(u, v, self.tolerance)),
            _ => false,
        }
    }
}

/// Scores `pred` against `truth`, which is expected to pass the filters of
/// `ctx` (as every dataset program does).
pub fn evaluate(pred: &[u32], truth: &Program, ctx: &EvalContext) -> Result<EvalReport, MetricError> {
    let truth_tokens = encode_program(truth)?;
    let body = program_body(pred);
    let token_accuracy = token_accuracy(body, &truth_tokens)?;
    let mut report = EvalReport {
        token_accuracy,
        sequence_equal: body == truth_tokens.as_slice(),
        compilable: false,
        functionally_equivalent: None,
        n_tokens: truth_tokens.len(),
        decode_error: None,
        rejection: None,
    };
    let program = match decode_program(pred) {
        Ok(p) => p,
        Err(e) => {
            report.decode_error = Some(e);
            return Ok(report);
        }
    };
    if let Err(r) = check(&program, &ctx.filter) {
        report.rejection = Some(r);
        return Ok(report);
    }
    report.compilable = true;
    report.functionally_equivalent = Some(report.sequence_equal || ctx.equivalent(&program, truth));
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub mean_token_accuracy: f64,
    pub sequence_equal: f64,
    pub compilable: f64,
    /// Over all reports; a non-compilable prediction counts as not equivalent.
    pub functionally_equivalent: f64,
    /// Share of reports per token-accuracy bin `[k/10, (k+1)/10)`, with 1.0
    /// in the last bin.
    pub accuracy_histogram: [f64; 10],
}

pub fn aggregate(reports: &[EvalReport]) -> EvalSummary {
    let n = reports.len();
    if n == 0 {
        return EvalSummary::default();
    }
    let frac = |f: &dyn Fn(&EvalReport) -> bool| reports.iter().filter(|r| f(r)).count() as f64 / n as f64;
    let mut hist = [0.0; 10];
    for r in reports {
        hist[((r.token_accuracy * 10.0) as usize).min(9)] += 1.0 / n as f64;
    }
    EvalSummary {
        n,
        mean_token_accuracy: reports.iter().map(|r| r.token_accuracy).sum::<f64>() / n as f64,
        sequence_equal: frac(&|r| r.sequence_equal),
        compilable: frac(&|r| r.compilable),
        functionally_equivalent: frac(&|r| r.functionally_equivalent == Some(true)),
        accuracy_histogram: hist,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rasp::parse;

    const ABS: &str = "var1 = Select(tokens, tokens, LT)\nvar2 = SelectorWidth(var1)\nvar3 = Map(lambda x: abs(x), var2)\noutput = var3\n";
    const RELU: &str = "var1 = Select(tokens, tokens, LT)\nvar2 = SelectorWidth(var1)\nvar3 = Map(lambda x: x if x > 0 else 0, var2)\noutput = var3\n";
    const INC: &str = "var1 = Select(tokens, tokens, LT)\nvar2 = SelectorWidth(var1)\nvar3 = Map(lambda x: x + 1, var2)\noutput = var3\n";

    fn enc(src: &str) -> Vec<u32> {
        encode_program(&parse(src).unwrap()).unwrap()
    }

    #[test]
    fn accuracy_arithmetic() {
        let t: Vec<u32> = (0..20).collect();
        assert_eq!(token_accuracy(&t, &t), Ok(1.0));
        let mut one_off = t.clone();
        one_off[7] = 99;
        assert_eq!(token_accuracy(&one_off, &t), Ok(0.95));
        assert_eq!(token_accuracy(&t[..10], &t), Ok(0.5));
        assert_eq!(token_accuracy(&[], &t), Ok(0.0));
        assert_eq!(token_accuracy(&t, &[]), Err(MetricError::EmptyTruth));
    }

    #[test]
    fn surplus_tokens_keep_accuracy_but_break_equality() {
        let ctx = EvalContext::default();
        let truth = parse(INC).unwrap();
        let mut pred = enc(INC);
        pred.extend([4, 16, 16, 9]);
        let r = evaluate(&pred, &truth, &ctx).unwrap();
        assert_eq!(r.token_accuracy, 1.0);
        assert!(!r.sequence_equal);
        assert!(!r.compilable, "the extra line leaves var3 unused");
        assert!(r.is_consistent());
    }

    #[test]
    fn exact_prediction() {
        let ctx = EvalContext::default();
        let truth = parse(INC).unwrap();
        let mut pred = vec![BOS];
        pred.extend(enc(INC));
        pred.extend([EOS, PAD]);
        let r = evaluate(&pred, &truth, &ctx).unwrap();
        assert_eq!(
            (r.token_accuracy, r.sequence_equal, r.compilable, r.functionally_equivalent),
            (1.0, true, true, Some(true))
        );
    }

    #[test]
    fn equivalent_but_different_lambdas() {
        let ctx = EvalContext::default();
        let r = evaluate(&enc(RELU), &parse(ABS).unwrap(), &ctx).unwrap();
        assert!(!r.sequence_equal && r.compilable);
        assert_eq!(r.functionally_equivalent, Some(true));
        assert_eq!(r.token_accuracy, 11.0 / 12.0);
        let r = evaluate(&enc(INC), &parse(ABS).unwrap(), &ctx).unwrap();
        assert_eq!(r.functionally_equivalent, Some(false));
    }

    #[test]
    fn undecodable_prediction() {
        let ctx = EvalContext::default();
        let r = evaluate(&[4, 16, 16], &parse(ABS).unwrap(), &ctx).unwrap();
        assert!(!r.compilable);
        assert_eq!(r.functionally_equivalent, None);
        assert_eq!(r.decode_error.as_ref().unwrap().position, 0);
        assert!(r.is_consistent());
    }

    #[test]
    fn equivalence_is_an_equivalence_on_triples() {
        let ctx = EvalContext::default();
        let ps = [ABS, RELU, INC].map(|s| parse(s).unwrap());
        for a in &ps {
            assert!(ctx.equivalent(a, a));
            for b in &ps {
                assert_eq!(ctx.equivalent(a, b), ctx.equivalent(b, a));
                for c in &ps {
                    if ctx.equivalent(a, b) && ctx.equivalent(b, c) {
                        assert!(ctx.equivalent(a, c));
                    }
                }
            }
        }
    }

    #[test]
    fn summary() {
        let base = EvalReport {
            token_accuracy: 1.0,
            sequence_equal: true,
            compilable: true,
            functionally_equivalent: Some(true),
            n_tokens: 20,
            decode_error: None,
            rejection: None,
        };
        let worse = EvalReport { token_accuracy: 0.9, sequence_equal: false, ..base.clone() };
        let s = aggregate(&[base.clone(), worse]);
        assert!((s.mean_token_accuracy - 0.95).abs() < 1e-12);
        assert_eq!(s.accuracy_histogram[9], 1.0);
        let all = aggregate(&[base.clone(), base]);
        assert_eq!(
            (all.sequence_equal, all.compilable, all.functionally_equivalent, all.mean_token_accuracy),
            (1.0, 1.0, 1.0, 1.0)
        );
        assert_eq!(aggregate(&[]).n, 0);
    }
}
