//! Dataset builds: generate, filter, compile and encode programs into
//! checksummed binary shards described by a JSON manifest.
//!
//! A build consumes the generator stream in index order, so its output is
//! fixed by the configuration alone, whatever the worker count. Each shard
//! is finished with a sidecar file; an interrupted build resumes after the
//! last finished shard.

mod record;
mod stats;

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::encode_program;
use crate::compiler::CompileConfig;
use crate::filters::{check, FilterConfig, RejectionCode, RejectionHistogram};
use crate::generator::{generate_nth, GenConfig, GenError};
use crate::probe::{function_probe_of_size, FUNCTION_PROBE_SIZE};
use crate::rasp::RaspConfig;

pub use record::{
    decode_shard, encode_shard, Fingerprint, Record, ShardReader, Split, StoredMatrix, SHARD_MAGIC, SHARD_VERSION,
};
pub use stats::{duplicate_stats, fingerprint, CorpusStats, DuplicateStats};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Disk(#[from] io::Error),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("checksum mismatch in {file}")]
    Checksum { file: String },
    #[error("generator failed at index {index} after {records} records: {source}")]
    Generator { index: u64, records: usize, source: GenError },
    #[error("invalid build config: {0}")]
    Config(String),
}

impl From<serde_json::Error> for DatasetError {
    fn from(e: serde_json::Error) -> Self {
        DatasetError::Format(e.to_string())
    }
}

/// Everything that determines the records of a build.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    pub gen: GenConfig,
    pub rasp: RaspConfig,
    pub compile: CompileConfig,
    pub max_sequence_maps: usize,
    pub max_lines: usize,
    pub function_probe_size: usize,
    pub shard_size: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        let f = FilterConfig::default();
        BuildConfig {
            gen: GenConfig::default(),
            rasp: f.rasp,
            compile: f.compile,
            max_sequence_maps: f.max_sequence_maps,
            max_lines: f.max_lines,
            function_probe_size: FUNCTION_PROBE_SIZE,
            shard_size: 10_000,
        }
    }
}

impl BuildConfig {
    pub fn with_seed(seed: u64) -> Self {
        let mut c = BuildConfig::default();
        c.gen.seed = seed;
        c
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            compile: self.compile.clone(),
            max_sequence_maps: self.max_sequence_maps,
            max_lines: self.max_lines,
            ..FilterConfig::new(self.rasp.clone())
        }
    }

    pub fn function_probe(&self) -> Vec<Vec<u8>> {
        function_probe_of_size(&self.rasp, self.function_probe_size)
    }
}

/// How a build runs, without affecting what it produces.
#[derive(Clone, Debug, Default)]
pub struct BuildOptions {
    /// Worker threads; `None` uses all available cores.
    pub workers: Option<usize>,
    /// Generator indices processed per parallel batch.
    pub batch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub file: String,
    pub records: usize,
    pub sha256: String,
    /// First generator index considered for this shard.
    pub first_index: u64,
    /// First generator index after this shard.
    pub next_index: u64,
    pub rejections: RejectionHistogram,
    pub restarts: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ShardSidecar {
    config_hash: String,
    shard: ShardInfo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub n_records: usize,
    pub seed: u64,
    pub config_hash: String,
    pub config: BuildConfig,
    /// Generator indices consumed.
    pub programs_generated: u64,
    pub generator_restarts: u64,
    pub rejections: RejectionHistogram,
    pub acceptance_rate: f64,
    pub stats: CorpusStats,
    pub duplicates: DuplicateStats,
    pub shards: Vec<ShardInfo>,
    /// Hex SHA-256 of this manifest with this field empty.
    pub manifest_hash: String,
}

impl Manifest {
    pub fn compute_hash(&self) -> String {
        let mut m = self.clone();
        m.manifest_hash.clear();
        sha256_hex(serde_json::to_string(&m).expect("manifest serializes").as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Manifest, DatasetError> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn shard_paths(&self, dir: &Path) -> Vec<PathBuf> {
        self.shards.iter().map(|s| dir.join(&s.file)).collect()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_sha256(path: &Path) -> Result<String, DatasetError> {
    let mut f = BufReader::new(File::open(path)?);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn shard_name(k: usize) -> String {
    format!("shard-{k:05}.bin")
}

fn sidecar_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("shard-{k:05}.json"))
}

/// Outcome of one generator index.
enum Produced {
    Accepted(Box<Record>, u64),
    Rejected(RejectionCode, u64),
}

struct Pipeline {
    cfg: BuildConfig,
    filter: FilterConfig,
    probe: Vec<Vec<u8>>,
}

impl Pipeline {
    fn produce(&self, index: u64) -> Result<Produced, GenError> {
        let (p, telemetry) = generate_nth(&self.cfg.gen, index)?;
        let restarts = telemetry.restarts as u64;
        let p = p.canonicalize();
        let t = match check(&p, &self.filter) {
            Ok(t) => t,
            Err(r) => return Ok(Produced::Rejected(r.code, restarts)),
        };
        let tokens = match encode_program(&p) {
            Ok(t) => t,
            Err(_) => return Ok(Produced::Rejected(RejectionCode::CompilerError, restarts)),
        };
        let fp = match fingerprint(&p, &self.cfg.rasp, &self.probe) {
            Ok(fp) => fp,
            Err(_) => return Ok(Produced::Rejected(RejectionCode::RuntimeError, restarts)),
        };
        Ok(Produced::Accepted(Box::new(Record::new(index, &p, &t, tokens, fp)), restarts))
    }
}

/// Builds `n_target` records into `out`, reusing finished shards of an
/// earlier run with the same configuration.
pub fn build(cfg: &BuildConfig, n_target: usize, out: &Path, opts: &BuildOptions) -> Result<Manifest, DatasetError> {
    if n_target == 0 {
        return Err(DatasetError::Config("n_target must be at least 1".into()));
    }
    if cfg.shard_size == 0 || cfg.function_probe_size == 0 {
        return Err(DatasetError::Config("shard size and probe size must be positive".into()));
    }
    cfg.gen.validate().map_err(|e| DatasetError::Config(e.to_string()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.unwrap_or(0))
        .build()
        .map_err(|e| DatasetError::Config(e.to_string()))?;
    fs::create_dir_all(out)?;
    let pipeline = Pipeline { cfg: cfg.clone(), filter: cfg.filter_config(), probe: cfg.function_probe() };
    let config_hash = cfg.hash();
    let batch = opts.batch.unwrap_or(64).max(1) as u64;

    let mut shards = Vec::new();
    let mut stats = CorpusStats::default();
    let mut texts_fps: Vec<(String, Fingerprint)> = Vec::with_capacity(n_target);
    let mut next_index = 0u64;
    let n_shards = n_target.div_ceil(cfg.shard_size);
    for k in 0..n_shards {
        let want = cfg.shard_size.min(n_target - k * cfg.shard_size);
        let path = out.join(shard_name(k));
        if let Some(info) = reusable_shard(out, k, &config_hash, want, next_index)? {
            for r in ShardReader::new(BufReader::new(File::open(&path)?))? {
                let r = r?;
                stats.add(&r);
                texts_fps.push((r.program_text, r.fingerprint));
            }
            next_index = info.next_index;
            shards.push(info);
            continue;
        }
        let _ = fs::remove_file(sidecar_path(out, k));
        let tmp = out.join(format!("{}.partial", shard_name(k)));
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(&record::shard_header(want as u32))?;
        let first_index = next_index;
        let mut rejections = RejectionHistogram::default();
        let mut restarts = 0u64;
        let mut written = 0usize;
        let mut failure = None;
        'fill: while written < want {
            let indices: Vec<u64> = (next_index..next_index + batch).collect();
            let results: Vec<_> = pool.install(|| indices.par_iter().map(|&i| (i, pipeline.produce(i))).collect());
            for (i, res) in results {
                if written == want {
                    break 'fill;
                }
                match res {
                    Err(e) => {
                        failure = Some((i, e));
                        break 'fill;
                    }
                    Ok(Produced::Rejected(code, r)) => {
                        rejections.add(code);
                        restarts += r;
                    }
                    Ok(Produced::Accepted(rec, r)) => {
                        restarts += r;
                        w.write_all(&record::encode_record(&rec))?;
                        stats.add(&rec);
                        texts_fps.push((rec.program_text, rec.fingerprint));
                        written += 1;
                    }
                }
                next_index = i + 1;
            }
        }
        let mut f = w.into_inner().map_err(|e| e.into_error())?;
        if written != want {
            f.seek(SeekFrom::Start(0))?;
            f.write_all(&record::shard_header(written as u32))?;
        }
        f.sync_all()?;
        drop(f);
        fs::rename(&tmp, &path)?;
        let info = ShardInfo {
            file: shard_name(k),
            records: written,
            sha256: file_sha256(&path)?,
            first_index,
            next_index,
            rejections,
            restarts,
        };
        if failure.is_none() {
            let sidecar = ShardSidecar { config_hash: config_hash.clone(), shard: info.clone() };
            fs::write(sidecar_path(out, k), serde_json::to_string_pretty(&sidecar)?)?;
        }
        shards.push(info);
        if let Some((index, source)) = failure {
            let manifest = assemble(cfg, &config_hash, shards, stats, &texts_fps);
            write_manifest(out, &manifest)?;
            return Err(DatasetError::Generator { index, records: manifest.n_records, source });
        }
    }
    let manifest = assemble(cfg, &config_hash, shards, stats, &texts_fps);
    write_manifest(out, &manifest)?;
    Ok(manifest)
}

fn reusable_shard(
    dir: &Path,
    k: usize,
    config_hash: &str,
    want: usize,
    first_index: u64,
) -> Result<Option<ShardInfo>, DatasetError> {
    let Ok(text) = fs::read_to_string(sidecar_path(dir, k)) else {
        return Ok(None);
    };
    let Ok(sidecar) = serde_json::from_str::<ShardSidecar>(&text) else {
        return Ok(None);
    };
    let info = sidecar.shard;
    let path = dir.join(&info.file);
    let ok = sidecar.config_hash == config_hash
        && info.records == want
        && info.first_index == first_index
        && path.exists()
        && file_sha256(&path)? == info.sha256;
    Ok(ok.then_some(info))
}

fn assemble(
    cfg: &BuildConfig,
    config_hash: &str,
    shards: Vec<ShardInfo>,
    stats: CorpusStats,
    texts_fps: &[(String, Fingerprint)],
) -> Manifest {
    let mut rejections = RejectionHistogram::default();
    for s in &shards {
        rejections.merge(&s.rejections);
    }
    let n_records: usize = shards.iter().map(|s| s.records).sum();
    let programs_generated = shards.last().map_or(0, |s| s.next_index);
    let mut m = Manifest {
        format_version: FORMAT_VERSION,
        n_records,
        seed: cfg.gen.seed,
        config_hash: config_hash.to_string(),
        config: cfg.clone(),
        programs_generated,
        generator_restarts: shards.iter().map(|s| s.restarts).sum(),
        acceptance_rate: if programs_generated == 0 { 0.0 } else { n_records as f64 / programs_generated as f64 },
        rejections,
        stats,
        duplicates: duplicate_stats(texts_fps.iter().map(|(t, f)| (t.as_str(), *f)), cfg.function_probe_size),
        shards,
        manifest_hash: String::new(),
    };
    m.manifest_hash = m.compute_hash();
    m
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<(), DatasetError> {
    let tmp = dir.join(format!("{MANIFEST_FILE}.partial"));
    fs::write(&tmp, serde_json::to_string_pretty(m)?)?;
    fs::rename(tmp, dir.join(MANIFEST_FILE))?;
    Ok(())
}

/// Reloads a dataset and checks its manifest hash, shard checksums and
/// record counts.
pub fn verify(dir: &Path) -> Result<Manifest, DatasetError> {
    let m = Manifest::load(dir)?;
    if m.compute_hash() != m.manifest_hash {
        return Err(DatasetError::Checksum { file: MANIFEST_FILE.into() });
    }
    let mut total = 0;
    for s in &m.shards {
        let path = dir.join(&s.file);
        if file_sha256(&path)? != s.sha256 {
            return Err(DatasetError::Checksum { file: s.file.clone() });
        }
        let reader = ShardReader::new(BufReader::new(File::open(&path)?))?;
        if reader.remaining() as usize != s.records {
            return Err(DatasetError::Format(format!(
                "{} holds {} records, manifest says {}",
                s.file,
                reader.remaining(),
                s.records
            )));
        }
        total += s.records;
    }
    if total != m.n_records {
        return Err(DatasetError::Format(format!("shards hold {total} records, manifest says {}", m.n_records)));
    }
    Ok(m)
}

/// Streams every record of a dataset in order.
pub fn records(dir: &Path) -> Result<impl Iterator<Item = Result<Record, DatasetError>>, DatasetError> {
    let m = Manifest::load(dir)?;
    let mut readers = Vec::new();
    for path in m.shard_paths(dir) {
        readers.push(ShardReader::new(BufReader::new(File::open(path)?))?);
    }
    Ok(readers.into_iter().flatten())
}

/// Duplicate statistics recomputed with a fresh probe of `probe_size`
/// inputs; the stored fingerprints are reused when the size matches.
pub fn duplicate_stats_with_probe(dir: &Path, probe_size: usize) -> Result<DuplicateStats, DatasetError> {
    let m = Manifest::load(dir)?;
    if probe_size == m.config.function_probe_size {
        return Ok(m.duplicates);
    }
    let cfg = BuildConfig { function_probe_size: probe_size, ..m.config.clone() };
    let probe = cfg.function_probe();
    let mut items = Vec::with_capacity(m.n_records);
    for r in records(dir)? {
        let r = r?;
        let p = r.program()?;
        let fp = fingerprint(&p, &cfg.rasp, &probe).map_err(|e| DatasetError::Format(e.to_string()))?;
        items.push((r.program_text, fp));
    }
    Ok(duplicate_stats(items.iter().map(|(t, f)| (t.as_str(), *f)), probe_size))
}
