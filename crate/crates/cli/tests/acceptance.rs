//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use forge_core::codec::{decode_program, encode_program, encode_weights, token_payload, BOS, EOS, PAD, VOCAB_SIZE};
use forge_core::dataset::{self, BuildConfig, BuildOptions, Manifest};
use forge_core::evalsuite::{evaluate, token_accuracy, EvalContext};
use forge_core::filters::{check, check_compiles, FilterConfig, RejectionCode};
use forge_core::generator::{generate_nth, GenConfig};
use forge_core::probe::{filter_probe, stratified_inputs};
use forge_core::rasp::{interpret, node_types, parse, value_kinds, InferConfig, Program, Ref, ValueKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const DIFF_PROGRAMS: usize = 1000;
const DIFF_INPUTS: usize = 100;
const DIFF_SEED: u64 = 1;
const NUMERICAL_TOLERANCE: f64 = 1e-4;
const DIFF_TIME_LIMIT: Duration = Duration::from_secs(15 * 60);

const GEN_PROGRAMS: u64 = 10_000;
const GEN_TIME_LIMIT: Duration = Duration::from_secs(5 * 60);

const CODEC_PROGRAMS: u64 = 10_000;
const CODEC_WEIGHT_PROGRAMS: u64 = 500;

const DATASET_RECORDS: usize = 10_000;
const DATASET_SEED: u64 = 0;
const MIN_LINE_SHARE: f64 = 0.90;
const MIN_MATRIX_SHARE: f64 = 0.99;

const FUZZ_STREAMS: usize = 10_000;
const FUZZ_SEED: u64 = 5;

const DETERMINISM_RECORDS: &str = "1000";
const DETERMINISM_SEED: &str = "42";

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn program(src: &str) -> Program {
    parse(src).unwrap()
}

fn differential() -> Outcome {
    let start = Instant::now();
    let filter = FilterConfig::default();
    let gen = GenConfig { seed: DIFF_SEED, ..Default::default() };
    let inputs = stratified_inputs(&filter.rasp, DIFF_INPUTS, DIFF_SEED);
    let mut compared = 0;
    let mut failures = Vec::new();
    let mut next = 0u64;
    while compared < DIFF_PROGRAMS {
        let batch: Vec<u64> = (next..next + 64).collect();
        next += 64;
        let results: Vec<Option<Result<(), String>>> = batch
            .par_iter()
            .map(|&i| {
                let p = generate_nth(&gen, i).ok()?.0;
                let (t, _) = check_compiles(&p, &filter).ok()?;
                let numerical = match p.output() {
                    Ref::Node(j) => value_kinds(&p)[j] == Some(ValueKind::Numerical),
                    _ => false,
                };
                for x in &inputs {
                    let want = interpret(&p, &filter.rasp, x).map_err(|e| format!("program {i}: {e}"));
                    let got = t.forward(x).map_err(|e| format!("program {i}: {e}"));
                    let (want, got) = match (want, got) {
                        (Ok(w), Ok(g)) => (w, g),
                        (Err(e), _) | (_, Err(e)) => return Some(Err(e)),
                    };
                    let agree = want.len() == got.len()
                        && want.iter().zip(&got).all(|(a, b)| match (a.as_f64(), b.as_f64()) {
                            (Some(a), Some(b)) if numerical => (a - b).abs() <= NUMERICAL_TOLERANCE,
                            _ => a == b,
                        });
                    if !agree {
                        return Some(Err(format!("program {i} on {x:?}: {want:?} vs {got:?}")));
                    }
                }
                Some(Ok(()))
            })
            .collect();
        for r in results.into_iter().flatten() {
            if compared == DIFF_PROGRAMS {
                break;
            }
            compared += 1;
            if let Err(e) = r {
                failures.push(e);
            }
        }
    }
    let took = start.elapsed();
    ensure(
        failures.is_empty(),
        format!("{} of {compared} programs disagree, first: {}", failures.len(), failures.first().map_or("", |s| s)),
    )?;
    ensure(took < DIFF_TIME_LIMIT, format!("took {took:?}"))?;
    Ok(format!("{compared} programs x {DIFF_INPUTS} inputs agree ({next} generated, {took:.1?})"))
}

fn generator_validity() -> Outcome {
    let start = Instant::now();
    let gen = GenConfig::default();
    let probe = filter_probe(&FilterConfig::default().rasp);
    let problems: Vec<String> = (0..GEN_PROGRAMS)
        .into_par_iter()
        .filter_map(|i| {
            let p = match generate_nth(&gen, i) {
                Ok((p, _)) => p,
                Err(e) => return Some(format!("program {i}: {e}")),
            };
            if let Err(e) = node_types(p.nodes()) {
                return Some(format!("program {i} is ill-typed: {e}"));
            }
            probe
                .iter()
                .find_map(|x| interpret(&p, &FilterConfig::default().rasp, x).err())
                .map(|e| format!("program {i}: {e}"))
        })
        .collect();
    let took = start.elapsed();
    ensure(problems.is_empty(), format!("{} invalid, first: {}", problems.len(), problems.first().map_or("", |s| s)))?;
    ensure(took < GEN_TIME_LIMIT, format!("took {took:?}"))?;
    Ok(format!("{GEN_PROGRAMS} programs well-typed and interpretable on {} inputs ({took:.1?})", probe.len()))
}

fn filter_witnesses() -> Outcome {
    let cfg = FilterConfig::default();
    let code = |p: &Program, cfg: &FilterConfig| check(p, cfg).err().map(|r| r.code);

    let three_maps = program(
        "var1 = SequenceMap(lambda x, y: x + y, indices, indices)\n\
         var2 = SequenceMap(lambda x, y: x + y, var1, indices)\n\
         var3 = SequenceMap(lambda x, y: x + y, var2, indices)\n\
         output = var3\n",
    );
    let mut long = String::from("var1 = Map(lambda x: x + 1, indices)\n");
    for i in 2..=16 {
        long.push_str(&format!("var{i} = Map(lambda x: x + 1, var{})\n", i - 1));
    }
    long.push_str("output = var16\n");
    let mean = program(
        "var1 = Select(tokens, tokens, TRUE)\n\
         var2 = Map(lambda x: x > 0, indices)\n\
         var3 = Aggregate(var1, var2)\n\
         output = var3\n",
    );
    let simple = program("var1 = Select(tokens, tokens, EQ)\nvar2 = SelectorWidth(var1)\noutput = var2\n");
    let mut tiny = cfg.clone();
    tiny.compile.infer = InferConfig { value_set_cap: 2, ..tiny.compile.infer };

    let cases = [
        ("three SequenceMaps", code(&three_maps, &cfg), Some(RejectionCode::TooManySequenceMaps)),
        ("sixteen lines", code(&program(&long), &cfg), Some(RejectionCode::TooLong)),
        ("numerical mean under TRUE", code(&mean, &cfg), Some(RejectionCode::InvalidAggregate)),
        ("value-set cap 2", code(&simple, &tiny), Some(RejectionCode::ValueSetOverflow)),
    ];
    for (name, got, want) in &cases {
        ensure(got == want, format!("{name}: got {got:?}, want {want:?}"))?;
    }
    ensure(RejectionCode::ValueSetOverflow.is_compiler_class(), "value-set overflow is not compiler-class")?;
    ensure(code(&simple, &cfg).is_none(), "the uncapped control program is rejected")?;
    Ok(format!("{} witnesses rejected with the expected codes", cases.len()))
}

fn codec() -> Outcome {
    let gen = GenConfig { seed: 3, ..Default::default() };
    let programs: Vec<Program> =
        (0..CODEC_PROGRAMS).into_par_iter().map(|i| generate_nth(&gen, i).unwrap().0).collect();
    for (i, p) in programs.iter().enumerate() {
        let tokens = encode_program(p).map_err(|e| format!("program {i}: {e}"))?;
        ensure(tokens.len() == 4 * p.len(), format!("program {i}: {} tokens for {} lines", tokens.len(), p.len()))?;
        let back = decode_program(&tokens).map_err(|e| format!("program {i}: {e}"))?;
        ensure(&back == p, format!("program {i} does not round trip"))?;
    }
    for (lines, want) in [(5, 20), (12, 48), (15, 60)] {
        let p = programs.iter().find(|p| p.len() == lines).ok_or(format!("no {lines}-line program"))?;
        let n = encode_program(p).unwrap().len();
        ensure(n == want, format!("{lines} lines gave {n} tokens"))?;
    }

    let filter = FilterConfig::default();
    let mut matrices = 0;
    for (i, p) in programs.iter().take(CODEC_WEIGHT_PROGRAMS as usize).enumerate() {
        let Ok(t) = check(p, &filter) else { continue };
        let tokens = encode_weights(&t).map_err(|e| format!("program {i}: {e}"))?;
        ensure(tokens.len() == t.matrices.len(), "one token per matrix")?;
        for (tok, m) in tokens.iter().zip(&t.matrices) {
            let (h, payload) = token_payload(tok).map_err(|e| format!("program {i}: {e}"))?;
            ensure(
                (h.role, h.layer, h.head, h.rows, h.cols) == (m.role, m.layer, m.head, m.rows, m.cols),
                format!("program {i}: header {h:?}"),
            )?;
            let exact = payload.len() == m.data.len()
                && payload.iter().zip(&m.data).all(|(a, &b)| a.to_bits() == (b as f32).to_bits());
            ensure(exact, format!("program {i}: payload differs"))?;
            matrices += 1;
        }
    }
    ensure(matrices > 0, "no program compiled")?;
    Ok(format!("{CODEC_PROGRAMS} programs round trip, {matrices} weight headers parse back, 5/12/15 lines give 20/48/60 tokens"))
}

fn dataset_distribution(dir: &Path) -> Outcome {
    let start = Instant::now();
    let cfg = BuildConfig::with_seed(DATASET_SEED);
    let m = dataset::build(&cfg, DATASET_RECORDS, dir, &BuildOptions::default()).map_err(|e| e.to_string())?;
    let s = &m.stats;
    ensure(s.n_records == DATASET_RECORDS, format!("{} records", s.n_records))?;
    let in_bounds = s.line_share(cfg.gen.min_lines, cfg.gen.max_lines);
    let lines = s.line_share(5, 12);
    let mats = s.matrix_share(8, 42);
    let d = &m.duplicates;
    let summary = format!(
        "lines in [5,12] {:.1}%, in [5,15] {:.1}%, matrices in [8,42] {:.2}%, duplicates {:.1}% functional vs {:.1}% string, acceptance {:.1}% ({:.0?})",
        100.0 * lines,
        100.0 * in_bounds,
        100.0 * mats,
        100.0 * d.functional_dup_fraction,
        100.0 * d.string_dup_fraction,
        100.0 * m.acceptance_rate,
        start.elapsed()
    );
    ensure(in_bounds == 1.0, format!("line counts outside [5,15]: {summary}"))?;
    ensure(lines >= MIN_LINE_SHARE, summary.clone())?;
    ensure(mats >= MIN_MATRIX_SHARE, summary.clone())?;
    ensure(d.probe_size == 1000, format!("duplicate probe has {} inputs", d.probe_size))?;
    ensure(d.functional_dup_fraction >= d.string_dup_fraction, summary.clone())?;
    Ok(summary)
}

const ABS: &str = "var1 = Select(tokens, tokens, LT)\nvar2 = SelectorWidth(var1)\nvar3 = Map(lambda x: abs(x), var2)\noutput = var3\n";
const RELU: &str = "var1 = Select(tokens, tokens, LT)\nvar2 = SelectorWidth(var1)\nvar3 = Map(lambda x: x if x > 0 else 0, var2)\noutput = var3\n";

fn random_stream(rng: &mut ChaCha8Rng, truth: &[u32], other: &[u32]) -> Vec<u32> {
    match rng.random_range(0..6) {
        0 => (0..rng.random_range(0..70)).map(|_| rng.random_range(0..VOCAB_SIZE)).collect(),
        1 => {
            let mut s = truth.to_vec();
            for _ in 0..rng.random_range(1..4) {
                let at = rng.random_range(0..s.len());
                s[at] = rng.random_range(0..VOCAB_SIZE);
            }
            s
        }
        2 => truth[..rng.random_range(0..=truth.len())].to_vec(),
        3 => {
            let mut s = vec![BOS];
            s.extend_from_slice(if rng.random_bool(0.5) { truth } else { other });
            s.push(EOS);
            s.extend(std::iter::repeat_n(PAD, rng.random_range(0..5)));
            s
        }
        4 => other.to_vec(),
        _ => (0..rng.random_range(0..70)).map(|_| rng.random_range(0..200)).collect(),
    }
}

fn metric_laws() -> Outcome {
    let ctx = EvalContext::default();
    let x: Vec<u32> = (0..20).collect();
    ensure(token_accuracy(&x, &x) == Ok(1.0), "accuracy of x against itself")?;
    let mut y = x.clone();
    y[13] = 0;
    ensure(token_accuracy(&y, &x) == Ok(0.95), format!("one of 20 wrong gave {:?}", token_accuracy(&y, &x)))?;

    let r = evaluate(&encode_program(&program(RELU)).unwrap(), &program(ABS), &ctx).map_err(|e| e.to_string())?;
    ensure(!r.sequence_equal && r.functionally_equivalent == Some(true), format!("abs/relu pair: {r:?}"))?;

    let gen = GenConfig { seed: FUZZ_SEED, ..Default::default() };
    // Ground truths are dataset programs, so they pass every filter.
    let truths: Vec<(Program, Vec<u32>)> = (0..)
        .map(|i| generate_nth(&gen, i).unwrap().0.canonicalize())
        .filter(|p| check(p, &ctx.filter).is_ok())
        .take(200)
        .map(|p| {
            let t = encode_program(&p).unwrap();
            (p, t)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(FUZZ_SEED);
    let cases: Vec<(usize, Vec<u32>)> = (0..FUZZ_STREAMS)
        .map(|k| {
            let other = &truths[rng.random_range(0..truths.len())].1;
            (k % truths.len(), random_stream(&mut rng, &truths[k % truths.len()].1, other))
        })
        .collect();
    let outcomes: Vec<Result<bool, String>> = cases
        .par_iter()
        .map(|(t, s)| {
            let run = catch_unwind(AssertUnwindSafe(|| evaluate(s, &truths[*t].0, &ctx)));
            match run {
                Err(_) => Err(format!("panic on {s:?}")),
                Ok(Err(e)) => Err(format!("{e} on {s:?}")),
                Ok(Ok(r)) if !r.is_consistent() => Err(format!("inconsistent report {r:?}")),
                Ok(Ok(r)) => Ok(r.compilable),
            }
        })
        .collect();
    let compilable = outcomes.iter().filter(|o| matches!(o, Ok(true))).count();
    if let Some(Err(e)) = outcomes.iter().find(|o| o.is_err()) {
        return Err(e.clone());
    }
    Ok(format!("laws hold, {FUZZ_STREAMS} fuzzed streams consistent ({compilable} compilable)"))
}

fn determinism(root: &Path) -> Outcome {
    let mut hashes = Vec::new();
    for run in ["a", "b"] {
        let out = root.join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_forge"))
            .args(["build", "--n", DETERMINISM_RECORDS, "--seed", DETERMINISM_SEED, "--out"])
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), format!("forge build failed: {}", String::from_utf8_lossy(&status.stderr)))?;
        hashes.push(Manifest::load(&out).map_err(|e| e.to_string())?.manifest_hash);
    }
    ensure(hashes[0] == hashes[1], format!("{} vs {}", hashes[0], hashes[1]))?;
    Ok(format!("manifest hash {}", hashes[0]))
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<Criterion> = vec![
        ("differential compiler correctness", Box::new(differential)),
        ("generator validity", Box::new(generator_validity)),
        ("filter witnesses", Box::new(filter_witnesses)),
        ("codec round trip", Box::new(codec)),
        ("dataset distribution", Box::new(|| dataset_distribution(&scratch.path().join("dataset")))),
        ("metric laws", Box::new(metric_laws)),
        ("determinism", Box::new(|| determinism(&scratch.path().join("determinism")))),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
