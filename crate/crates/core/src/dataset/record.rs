//! One dataset record and the binary shard container.

use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::codec::{decode_program, MatrixHeader, HEADER_LEN, WEIGHT_TOKEN_WIDTH};
use crate::compiler::{CompiledTransformer, Role};
use crate::rasp::Program;

use super::DatasetError;

pub const SHARD_MAGIC: [u8; 4] = *b"FRGS";
pub const SHARD_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    /// 95 / 2.5 / 2.5 by fingerprint, so functional duplicates share a split.
    pub fn of(fingerprint: &Fingerprint) -> Split {
        let bucket = u64::from_le_bytes(fingerprint.0[8..16].try_into().unwrap()) % 1000;
        match bucket {
            0..950 => Split::Train,
            950..975 => Split::Val,
            _ => Split::Test,
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Split> {
        Split::ALL.get(c as usize).copied()
    }
}

/// First 16 bytes of a SHA-256 over a program's outputs on the function probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Fingerprint(#[serde(with = "hex_bytes")] pub [u8; 16]);

impl Fingerprint {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

mod hex_bytes {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8; 16], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 16], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(&s).map_err(D::Error::custom)?;
        v.try_into().map_err(|_| D::Error::custom("fingerprint must be 16 bytes"))
    }
}

/// A weight matrix as stored: header fields and row-major f32 values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredMatrix {
    pub header: MatrixHeader,
    pub data: Vec<f32>,
}

impl StoredMatrix {
    /// The fixed-width weight token: header, values, zero padding.
    pub fn to_token(&self) -> Vec<f32> {
        let mut t = vec![0.0; WEIGHT_TOKEN_WIDTH];
        self.header.write(&mut t);
        t[HEADER_LEN..HEADER_LEN + self.data.len()].copy_from_slice(&self.data);
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    /// Index of the program in the generator stream.
    pub source_index: u64,
    pub fingerprint: Fingerprint,
    pub split: Split,
    /// Canonical text rendering.
    pub program_text: String,
    pub program_tokens: Vec<u32>,
    pub matrices: Vec<StoredMatrix>,
}

impl Record {
    pub fn new(
        source_index: u64,
        program: &Program,
        t: &CompiledTransformer,
        program_tokens: Vec<u32>,
        fingerprint: Fingerprint,
    ) -> Record {
        let matrices = t
            .matrices
            .iter()
            .map(|m| StoredMatrix {
                header: MatrixHeader { role: m.role, layer: m.layer, head: m.head, rows: m.rows, cols: m.cols },
                data: m.data.iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Record {
            source_index,
            fingerprint,
            split: Split::of(&fingerprint),
            program_text: crate::rasp::render(program),
            program_tokens,
            matrices,
        }
    }

    pub fn n_lines(&self) -> usize {
        self.program_tokens.len() / crate::codec::TOKENS_PER_LINE
    }

    pub fn weight_tokens(&self) -> Vec<Vec<f32>> {
        self.matrices.iter().map(StoredMatrix::to_token).collect()
    }

    pub fn program(&self) -> Result<Program, DatasetError> {
        decode_program(&self.program_tokens)
            .map_err(|e| DatasetError::Format(format!("record {}: {e}", self.source_index)))
    }

    fn write(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.extend(0u32.to_le_bytes());
        out.extend(self.source_index.to_le_bytes());
        out.extend(self.fingerprint.0);
        out.push(self.split.code());
        out.extend((self.program_text.len() as u32).to_le_bytes());
        out.extend(self.program_text.as_bytes());
        out.extend((self.program_tokens.len() as u16).to_le_bytes());
        out.extend(self.program_tokens.iter().map(|&t| t as u8));
        out.extend((self.matrices.len() as u16).to_le_bytes());
        for m in &self.matrices {
            let h = &m.header;
            out.push(h.role.index() as u8);
            out.extend((h.layer as u16).to_le_bytes());
            out.extend(h.head.map_or(-1i16, |x| x as i16).to_le_bytes());
            out.extend((h.rows as u32).to_le_bytes());
            out.extend((h.cols as u32).to_le_bytes());
            for v in &m.data {
                out.extend(v.to_le_bytes());
            }
        }
        let len = (out.len() - start - 4) as u32;
        out[start..start + 4].copy_from_slice(&len.to_le_bytes());
    }
}

/// Bytes of the shard header: magic, version, record count.
pub const SHARD_HEADER_LEN: usize = 12;

pub fn shard_header(n_records: u32) -> [u8; SHARD_HEADER_LEN] {
    let mut h = [0u8; SHARD_HEADER_LEN];
    h[..4].copy_from_slice(&SHARD_MAGIC);
    h[4..8].copy_from_slice(&SHARD_VERSION.to_le_bytes());
    h[8..].copy_from_slice(&n_records.to_le_bytes());
    h
}

/// Serializes records into one shard.
pub fn encode_shard(records: &[Record]) -> Vec<u8> {
    let mut out = shard_header(records.len() as u32).to_vec();
    for r in records {
        r.write(&mut out);
    }
    out
}

pub(crate) fn encode_record(r: &Record) -> Vec<u8> {
    let mut out = Vec::new();
    r.write(&mut out);
    out
}

/// Streams the records of a shard.
pub struct ShardReader<R> {
    inner: R,
    remaining: u32,
    done: bool,
}

impl<R: Read> ShardReader<R> {
    pub fn new(mut inner: R) -> Result<Self, DatasetError> {
        let mut h = [0u8; SHARD_HEADER_LEN];
        inner.read_exact(&mut h).map_err(|_| DatasetError::Format("shard shorter than its header".into()))?;
        if h[..4] != SHARD_MAGIC {
            return Err(DatasetError::Format("not a shard file".into()));
        }
        let version = u32::from_le_bytes(h[4..8].try_into().unwrap());
        if version != SHARD_VERSION {
            return Err(DatasetError::Format(format!("unsupported shard version {version}")));
        }
        Ok(ShardReader { inner, remaining: u32::from_le_bytes(h[8..].try_into().unwrap()), done: false })
    }

    /// Records still to be read.
    pub fn remaining(&self) -> u32 {
        self.remaining
    }

    fn next_record(&mut self) -> Result<Option<Record>, DatasetError> {
        if self.remaining == 0 {
            let mut probe = [0u8; 1];
            return match self.inner.read(&mut probe)? {
                0 => Ok(None),
                _ => Err(DatasetError::Format("trailing bytes after the last record".into())),
            };
        }
        let mut len = [0u8; 4];
        self.inner.read_exact(&mut len).map_err(|_| DatasetError::Format("truncated shard".into()))?;
        let len = u32::from_le_bytes(len) as usize;
        let mut buf = Vec::new();
        (&mut self.inner).take(len as u64).read_to_end(&mut buf)?;
        if buf.len() != len {
            return Err(DatasetError::Format("truncated shard".into()));
        }
        self.remaining -= 1;
        parse_record(&buf).map(Some)
    }
}

impl<R: Read> Iterator for ShardReader<R> {
    type Item = Result<Record, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let r = self.next_record().transpose();
        if !matches!(r, Some(Ok(_))) {
            self.done = true;
        }
        r
    }
}

pub fn decode_shard(buf: &[u8]) -> Result<Vec<Record>, DatasetError> {
    ShardReader::new(buf)?.collect()
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| DatasetError::Format(format!("record ends early at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DatasetError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8, DatasetError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DatasetError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}

fn parse_record(buf: &[u8]) -> Result<Record, DatasetError> {
    let bad = DatasetError::Format;
    let mut r = Cursor { buf, pos: 0 };
    let source_index = u64::from_le_bytes(r.array()?);
    let fingerprint = Fingerprint(r.array()?);
    let split = Split::from_code(r.u8()?).ok_or_else(|| bad("bad split code".into()))?;
    let text_len = r.u32()? as usize;
    let program_text = String::from_utf8(r.take(text_len)?.to_vec()).map_err(|e| bad(e.to_string()))?;
    let n_tok = r.u16()? as usize;
    let program_tokens = r.take(n_tok)?.iter().map(|&t| t as u32).collect();
    let n_mat = r.u16()? as usize;
    let mut matrices = Vec::with_capacity(n_mat);
    for _ in 0..n_mat {
        let role = Role::from_index(r.u8()? as usize).ok_or_else(|| bad("bad role".into()))?;
        let layer = r.u16()? as usize;
        let head = i16::from_le_bytes(r.array()?);
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let bytes =
            rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).ok_or_else(|| bad("matrix size overflows".into()))?;
        let data = r.take(bytes)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let head = if head < 0 { None } else { Some(head as usize) };
        matrices.push(StoredMatrix { header: MatrixHeader { role, layer, head, rows, cols }, data });
    }
    if r.pos != buf.len() {
        return Err(bad(format!("record {source_index} has trailing bytes")));
    }
    Ok(Record { source_index, fingerprint, split, program_text, program_tokens, matrices })
}
