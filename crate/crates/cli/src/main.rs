//! `forge`: generate RASP programs, build decompilation datasets, compile
//! programs to transformer weights, and score decompiler predictions.
//!
//! Exit status is 0 on success, 1 when a command fails (including a failed
//! differential test), and 2 on a usage error.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use forge_core::compiler::{compile, CompiledTransformer};
use forge_core::dataset::{self, BuildConfig, BuildOptions, Manifest};
use forge_core::difftest::difftest;
use forge_core::evalsuite::{aggregate, evaluate, EvalContext, EvalReport};
use forge_core::filters::{check, FilterConfig};
use forge_core::generator::{generate_nth, GenConfig};
use forge_core::probe::{function_probe_of_size, stratified_inputs};
use forge_core::rasp::{parse, render, Program, RaspConfig};
use serde::Deserialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "forge", version, about = "RASP program generation, compilation and decompiler evaluation")]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<NonZeroUsize>,
    /// Random seed.
    #[arg(long, global = true, env = "FORGE_SEED", default_value_t = 0)]
    seed: u64,
    /// Token vocabulary size of program inputs.
    #[arg(long, global = true, default_value_t = 5, value_parser = clap::value_parser!(u8).range(1..=26))]
    vocab: u8,
    /// Longest program input.
    #[arg(long, global = true, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..=64))]
    max_len: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample programs from the generator and print them.
    Gen {
        #[arg(long, default_value_t = NonZeroUsize::new(10).unwrap())]
        n: NonZeroUsize,
        /// Print only programs that pass every filter.
        #[arg(long)]
        accepted: bool,
    },
    /// Build a dataset of compiled programs.
    Build {
        #[arg(long)]
        n: NonZeroUsize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = NonZeroUsize::new(10_000).unwrap())]
        shard_size: NonZeroUsize,
        /// Inputs used for functional fingerprints.
        #[arg(long, default_value_t = NonZeroUsize::new(1000).unwrap())]
        probe: NonZeroUsize,
        /// Per-program compile time limit in seconds.
        #[arg(long, default_value_t = NonZeroUsize::new(10).unwrap())]
        guard_secs: NonZeroUsize,
    },
    /// Verify a dataset and print its statistics.
    Stats {
        dir: PathBuf,
        /// Inputs used for the duplicate statistics.
        #[arg(long, default_value_t = NonZeroUsize::new(1000).unwrap())]
        probe: NonZeroUsize,
    },
    /// Compile one program (text file, or `-` for stdin) and describe its weights.
    Compile {
        program: PathBuf,
        /// Write the full compiled transformer as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare interpreter and compiled forward pass on generated programs.
    Difftest {
        #[arg(long, default_value_t = NonZeroUsize::new(100).unwrap())]
        n: NonZeroUsize,
        /// Inputs per program.
        #[arg(long, default_value_t = NonZeroUsize::new(100).unwrap())]
        inputs: NonZeroUsize,
    },
    /// Score predicted program tokens against a dataset.
    Eval {
        /// JSON lines of `{"source_index": N, "tokens": [...]}`.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Nar)]
        mode: Mode,
        /// Write one JSON report per prediction to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Ar,
    Nar,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Ar => "autoregressive",
            Mode::Nar => "non-autoregressive",
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Returns whether the command succeeded.
fn run(cli: Cli) -> Result<bool> {
    if let Some(w) = cli.workers {
        rayon::ThreadPoolBuilder::new().num_threads(w.get()).build_global()?;
    }
    let rasp = RaspConfig::small(cli.vocab, cli.max_len as usize);
    let gen = GenConfig { seed: cli.seed, ..Default::default() };
    match cli.command {
        Command::Gen { n, accepted } => cmd_gen(&gen, &rasp, n.get(), accepted, cli.json),
        Command::Build { n, out, shard_size, probe, guard_secs } => {
            let mut cfg = BuildConfig::with_seed(cli.seed);
            cfg.rasp = rasp;
            cfg.shard_size = shard_size.get();
            cfg.function_probe_size = probe.get();
            cfg.compile.guard = std::time::Duration::from_secs(guard_secs.get() as u64);
            let opts = BuildOptions { workers: cli.workers.map(NonZeroUsize::get), batch: None };
            let m = dataset::build(&cfg, n.get(), &out, &opts)?;
            print_manifest(&m, &m.duplicates, cli.json)?;
            Ok(true)
        }
        Command::Stats { dir, probe } => {
            let m = dataset::verify(&dir)?;
            let dups = dataset::duplicate_stats_with_probe(&dir, probe.get())?;
            print_manifest(&m, &dups, cli.json)?;
            Ok(true)
        }
        Command::Compile { program, out } => cmd_compile(&program, out.as_deref(), &rasp, cli.json),
        Command::Difftest { n, inputs } => {
            let filter = FilterConfig::new(rasp.clone());
            let inputs = stratified_inputs(&rasp, inputs.get(), cli.seed ^ 0xd1ff);
            let r = difftest(&gen, &filter, n.get(), &inputs)?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&r)?);
            } else {
                println!(
                    "{}/{} match ({} inputs each, {} generated)",
                    r.matching, r.programs, r.inputs_per_program, r.generated
                );
                for m in &r.mismatches {
                    println!("\nmismatch on {:?} (generator index {}):\n{}", m.input, m.source_index, m.program);
                }
            }
            Ok(r.matching == r.programs)
        }
        Command::Eval { pred, data, mode, out } => cmd_eval(&pred, &data, mode, out.as_deref(), cli.json),
    }
}

fn cmd_gen(gen: &GenConfig, rasp: &RaspConfig, n: usize, accepted: bool, as_json: bool) -> Result<bool> {
    let filter = FilterConfig::new(rasp.clone());
    let mut out = Vec::new();
    let mut index = 0u64;
    while out.len() < n {
        let (p, telemetry) = generate_nth(gen, index)?;
        let verdict = check(&p, &filter).err();
        if !accepted || verdict.is_none() {
            out.push((index, p, telemetry, verdict));
        }
        index += 1;
    }
    let stdout = io::stdout();
    let mut w = stdout.lock();
    if as_json {
        let items: Vec<_> = out
            .iter()
            .map(|(i, p, t, v)| json!({"index": i, "lines": p.len(), "program": render(p), "restarts": t.restarts, "rejection": v}))
            .collect();
        writeln!(w, "{}", serde_json::to_string_pretty(&items)?)?;
    } else {
        for (k, (i, p, _, v)) in out.iter().enumerate() {
            if k > 0 {
                writeln!(w)?;
            }
            let status = v.as_ref().map_or("accepted".to_string(), |r| format!("rejected: {}", r.code));
            write!(w, "# program {i} ({} lines, {status})\n{}", p.len(), render(p))?;
        }
    }
    Ok(true)
}

fn print_manifest(m: &Manifest, dups: &dataset::DuplicateStats, as_json: bool) -> Result<()> {
    if as_json {
        let mut v = serde_json::to_value(m)?;
        v["duplicates"] = serde_json::to_value(dups)?;
        println!("{}", serde_json::to_string_pretty(&v)?);
        return Ok(());
    }
    println!("records            {}", m.n_records);
    println!("manifest hash      {}", m.manifest_hash);
    println!("seed               {}", m.seed);
    println!("programs generated {} (acceptance {:.1}%)", m.programs_generated, 100.0 * m.acceptance_rate);
    println!("rejections");
    for (code, n) in &m.rejections.0 {
        println!("  {code:<20} {n}");
    }
    println!("lines in [5,12]    {:.1}%", 100.0 * m.stats.line_share(5, 12));
    println!("matrices in [8,42] {:.1}%", 100.0 * m.stats.matrix_share(8, 42));
    println!("line counts        {}", histogram(&m.stats.line_counts));
    println!("matrix counts      {}", histogram(&m.stats.matrix_counts));
    let splits: Vec<String> = m.stats.splits.iter().map(|(s, n)| format!("{s:?}={n}").to_lowercase()).collect();
    println!("splits             {}", splits.join(" "));
    println!(
        "duplicates         {:.1}% functional, {:.1}% string ({} probe inputs)",
        100.0 * dups.functional_dup_fraction,
        100.0 * dups.string_dup_fraction,
        dups.probe_size
    );
    Ok(())
}

fn histogram(h: &std::collections::BTreeMap<usize, usize>) -> String {
    h.iter().map(|(k, v)| format!("{k}:{v}")).collect::<Vec<_>>().join(" ")
}

fn read_program(path: &Path) -> Result<Program> {
    let text = if path == Path::new("-") {
        let mut s = String::new();
        io::stdin().read_to_string(&mut s)?;
        s
    } else {
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?
    };
    Ok(parse(&text)?)
}

fn cmd_compile(path: &Path, out: Option<&Path>, rasp: &RaspConfig, as_json: bool) -> Result<bool> {
    let p = read_program(path)?;
    let t: CompiledTransformer = compile(&p, rasp, &Default::default())?;
    let budget = forge_core::codec::check_budget(&t).err();
    if let Some(path) = out {
        serde_json::to_writer(io::BufWriter::new(File::create(path)?), &t)?;
    }
    let census = t.census();
    if as_json {
        let matrices: Vec<_> = t
            .matrices
            .iter()
            .map(|m| {
                json!({"role": m.role, "layer": m.layer, "head": m.head, "rows": m.rows, "cols": m.cols,
                            "nonzero": m.data.iter().filter(|&&x| x != 0.0).count()})
            })
            .collect();
        let v = json!({"layers": t.n_layers, "residual_dim": t.layout.total_dim, "census": census,
                       "fits_token_budget": budget.is_none(), "matrices": matrices});
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        println!(
            "{} layers, residual width {}, {} matrices ({} heads, {} MLPs)",
            t.n_layers, t.layout.total_dim, census.total, census.heads, census.mlp_layers
        );
        for m in &t.matrices {
            let head = m.head.map_or("-".to_string(), |h| h.to_string());
            let nz = m.data.iter().filter(|&&x| x != 0.0).count();
            println!(
                "  layer {:<2} {:<10} head {:<2} {:>3} x {:<3} {nz} nonzero",
                m.layer,
                format!("{:?}", m.role),
                head,
                m.rows,
                m.cols
            );
        }
        if let Some(e) = &budget {
            println!("does not fit the weight-token budget: {e}");
        }
    }
    Ok(true)
}

#[derive(Deserialize)]
struct Prediction {
    source_index: u64,
    tokens: Vec<u32>,
}

fn cmd_eval(pred: &Path, data: &Path, mode: Mode, out: Option<&Path>, as_json: bool) -> Result<bool> {
    let manifest = dataset::verify(data)?;
    let mut truths: HashMap<u64, Program> = HashMap::new();
    for r in dataset::records(data)? {
        let r = r?;
        truths.insert(r.source_index, r.program()?);
    }
    let mut preds = Vec::new();
    for (n, line) in
        BufReader::new(File::open(pred).with_context(|| format!("opening {}", pred.display()))?).lines().enumerate()
    {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(&line).with_context(|| format!("{}:{}", pred.display(), n + 1))?;
        if !truths.contains_key(&p.source_index) {
            bail!("{}:{}: no record with source_index {}", pred.display(), n + 1, p.source_index);
        }
        preds.push(p);
    }
    let cfg = &manifest.config;
    let ctx = EvalContext {
        filter: cfg.filter_config(),
        probe: function_probe_of_size(&cfg.rasp, cfg.function_probe_size),
        ..EvalContext::default()
    };
    use rayon::prelude::*;
    let reports: Vec<EvalReport> =
        preds.par_iter().map(|p| evaluate(&p.tokens, &truths[&p.source_index], &ctx)).collect::<Result<_, _>>()?;
    if let Some(path) = out {
        let mut w = io::BufWriter::new(File::create(path)?);
        for (p, r) in preds.iter().zip(&reports) {
            let mut v = serde_json::to_value(r)?;
            v["source_index"] = json!(p.source_index);
            writeln!(w, "{}", serde_json::to_string(&v)?)?;
        }
    }
    let s = aggregate(&reports);
    if as_json {
        println!("{}", serde_json::to_string_pretty(&json!({"mode": mode.name(), "summary": s}))?);
    } else {
        println!("{} predictions ({} mode)", s.n, mode.name());
        println!("token accuracy          {:.4}", s.mean_token_accuracy);
        println!("sequence equal          {:.4}", s.sequence_equal);
        println!("compilable              {:.4}", s.compilable);
        println!("functionally equivalent {:.4}", s.functionally_equivalent);
        let bins: Vec<String> = s.accuracy_histogram.iter().map(|f| format!("{f:.3}")).collect();
        println!("accuracy histogram      {}", bins.join(" "));
    }
    Ok(true)
}
