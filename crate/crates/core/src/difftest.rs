//! Differential testing of the compiler: generated programs that compile are
//! run through both the interpreter and the compiled forward pass.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compiler::CompiledTransformer;
use crate::filters::{check_compiles, FilterConfig, RejectionHistogram};
use crate::generator::{generate_nth, GenConfig, GenError};
use crate::rasp::{interpret, render, values_match, Program, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub source_index: u64,
    pub program: String,
    pub input: Vec<u8>,
    pub expected: Vec<Value>,
    /// `None` when the forward pass itself failed.
    pub got: Option<Vec<Value>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    /// Programs compared.
    pub programs: usize,
    pub inputs_per_program: usize,
    /// Programs whose outputs agreed on every input.
    pub matching: usize,
    /// Generator indices consumed.
    pub generated: u64,
    /// Why the other generated programs were not compared.
    pub skipped: RejectionHistogram,
    /// First disagreement of each failing program.
    pub mismatches: Vec<Mismatch>,
}

/// An input, the interpreter's output, and the forward pass output (`None`
/// when it failed).
pub type Disagreement = (Vec<u8>, Vec<Value>, Option<Vec<Value>>);

/// First input on which `t` and `p` disagree, if any.
pub fn first_mismatch(p: &Program, t: &CompiledTransformer, inputs: &[Vec<u8>], tol: f64) -> Option<Disagreement> {
    for x in inputs {
        let Ok(want) = interpret(p, &t.config, x) else {
            continue;
        };
        match t.forward(x) {
            Ok(got) if values_match(&want, &got, tol) => {}
            Ok(got) => return Some((x.clone(), want, Some(got))),
            Err(_) => return Some((x.clone(), want, None)),
        }
    }
    None
}

/// Compares the first `n` generated programs that pass every check short of
/// the compiled-model comparison, each on all of `inputs`.
pub fn difftest(gen: &GenConfig, filter: &FilterConfig, n: usize, inputs: &[Vec<u8>]) -> Result<DiffReport, GenError> {
    const BATCH: u64 = 64;
    let mut report = DiffReport { inputs_per_program: inputs.len(), ..Default::default() };
    let mut next = 0u64;
    while report.programs < n {
        let batch: Vec<u64> = (next..next + BATCH).collect();
        let results: Vec<_> = batch
            .par_iter()
            .map(|&i| {
                let (p, _) = generate_nth(gen, i)?;
                Ok(match check_compiles(&p, filter) {
                    Ok((t, _)) => Ok(first_mismatch(&p, &t, inputs, filter.tolerance).map(|m| (render(&p), m))),
                    Err(r) => Err(r.code),
                })
            })
            .collect::<Result<_, GenError>>()?;
        for (i, res) in batch.into_iter().zip(results) {
            if report.programs == n {
                break;
            }
            report.generated = i + 1;
            match res {
                Err(code) => report.skipped.add(code),
                Ok(None) => {
                    report.programs += 1;
                    report.matching += 1;
                }
                Ok(Some((program, (input, expected, got)))) => {
                    report.programs += 1;
                    report.mismatches.push(Mismatch { source_index: i, program, input, expected, got });
                }
            }
        }
        next += BATCH;
    }
    Ok(report)
}
