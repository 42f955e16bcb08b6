use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rasp::{interpret, EvalError, Program, RaspConfig, Value};

use super::record::{Fingerprint, Record, Split};

/// Numbers are compared on this grid so that equal means computed along
/// different paths hash alike.
const NUM_GRID: f64 = 1e9;

/// Hash of `p`'s outputs on every probe input.
pub fn fingerprint(p: &Program, rasp: &RaspConfig, probe: &[Vec<u8>]) -> Result<Fingerprint, EvalError> {
    let mut h = Sha256::new();
    for x in probe {
        for v in interpret(p, rasp, x)? {
            match v {
                Value::Sym(s) => h.update([0, s]),
                Value::Bool(b) => h.update([1, b as u8]),
                Value::Num(n) => {
                    h.update([2]);
                    h.update(((n * NUM_GRID).round() as i64).to_le_bytes());
                }
            }
        }
        h.update([0xff]);
    }
    let digest = h.finalize();
    Ok(Fingerprint(digest[..16].try_into().unwrap()))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DuplicateStats {
    pub n: usize,
    pub probe_size: usize,
    pub distinct_programs: usize,
    pub distinct_functions: usize,
    /// Share of records whose canonical text already occurred.
    pub string_dup_fraction: f64,
    /// Share of records whose fingerprint already occurred.
    pub functional_dup_fraction: f64,
}

/// `items` are (canonical text, fingerprint) pairs.
pub fn duplicate_stats<'a>(
    items: impl IntoIterator<Item = (&'a str, Fingerprint)>,
    probe_size: usize,
) -> DuplicateStats {
    let mut texts = HashSet::new();
    let mut prints = HashSet::new();
    let mut n = 0;
    for (text, fp) in items {
        n += 1;
        texts.insert(text);
        prints.insert(fp);
    }
    let frac = |distinct: usize| if n == 0 { 0.0 } else { (n - distinct) as f64 / n as f64 };
    DuplicateStats {
        n,
        probe_size,
        distinct_programs: texts.len(),
        distinct_functions: prints.len(),
        string_dup_fraction: frac(texts.len()),
        functional_dup_fraction: frac(prints.len()),
    }
}

/// Summary statistics of a set of records.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_records: usize,
    pub line_counts: BTreeMap<usize, usize>,
    pub matrix_counts: BTreeMap<usize, usize>,
    pub splits: BTreeMap<Split, usize>,
}

impl CorpusStats {
    pub fn add(&mut self, r: &Record) {
        self.n_records += 1;
        *self.line_counts.entry(r.n_lines()).or_default() += 1;
        *self.matrix_counts.entry(r.matrices.len()).or_default() += 1;
        *self.splits.entry(r.split).or_default() += 1;
    }

    /// Share of records with a line count in `lo..=hi`.
    pub fn line_share(&self, lo: usize, hi: usize) -> f64 {
        share(&self.line_counts, lo, hi)
    }

    /// Share of records with a matrix count in `lo..=hi`.
    pub fn matrix_share(&self, lo: usize, hi: usize) -> f64 {
        share(&self.matrix_counts, lo, hi)
    }
}

fn share(h: &BTreeMap<usize, usize>, lo: usize, hi: usize) -> f64 {
    let total: usize = h.values().sum();
    if total == 0 {
        return 0.0;
    }
    h.range(lo..=hi).map(|(_, c)| c).sum::<usize>() as f64 / total as f64
}
