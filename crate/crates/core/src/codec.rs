//! Token encodings: programs as four tokens per line, compiled transformers
//! as one fixed-width real vector per weight matrix.
//!
//! Program token ids (vocabulary of 32):
//!
//! | id     | meaning                                               |
//! |--------|-------------------------------------------------------|
//! | 0      | PAD                                                   |
//! | 1      | BOS                                                   |
//! | 2      | EOS                                                   |
//! | 3      | empty argument                                        |
//! | 4..=8  | Select, Aggregate, SelectorWidth, Map, SequenceMap    |
//! | 9..=15 | predicates EQ, NEQ, LT, LEQ, GT, GEQ, TRUE            |
//! | 16..   | references: tokens, indices, var1, var2, ...          |
//! | 16..   | lambdas, read in their function's library             |
//!
//! Lines are `[function, a1, a2, a3]`:
//! `Select [keys, queries, predicate]`, `Aggregate [selector, sop, empty]`,
//! `SelectorWidth [selector, empty, empty]`, `Map [lambda, sop, empty]`,
//! `SequenceMap [lambda, lhs, rhs]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compiler::{CompiledTransformer, Role};
use crate::rasp::{node_types, BinaryFn, Function, Node, Predicate, Program, Ref, UnaryFn};

pub const VOCAB_SIZE: u32 = 32;
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const EMPTY: u32 = 3;
pub const FUNCTION_BASE: u32 = 4;
pub const PREDICATE_BASE: u32 = 9;
pub const REF_BASE: u32 = 16;
pub const LAMBDA_BASE: u32 = 16;
pub const TOKENS_PER_LINE: usize = 4;
/// Nodes addressable by a reference token.
pub const MAX_REFERENCED_NODES: usize = (VOCAB_SIZE - REF_BASE - 2) as usize;

/// Width of a weight token.
pub const WEIGHT_TOKEN_WIDTH: usize = 2000;
/// Leading metadata slots of a weight token.
pub const HEADER_LEN: usize = 16;
/// Largest `rows * cols` a weight token can carry.
pub const MAX_PAYLOAD: usize = WEIGHT_TOKEN_WIDTH - HEADER_LEN;

const H_LAYER: usize = 8;
const H_HEAD: usize = 9;
const H_ROWS: usize = 10;
const H_COLS: usize = 11;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("var{} is referenced but only {MAX_REFERENCED_NODES} variables fit the vocabulary", node + 1)]
    VocabOverflow { node: usize },
    #[error("the program returns a primitive other than tokens, which has no encoding")]
    Unencodable,
    #[error("matrix {index} has {size} entries, over the budget of {MAX_PAYLOAD}")]
    TokenBudgetExceeded { index: usize, size: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[error("invalid token at position {position}: {reason}")]
pub struct DecodeError {
    pub position: usize,
    pub reason: String,
}

fn ref_token(r: Ref) -> Result<u32, EncodeError> {
    Ok(match r {
        Ref::Tokens => REF_BASE,
        Ref::Indices => REF_BASE + 1,
        Ref::Node(i) if i < MAX_REFERENCED_NODES => REF_BASE + 2 + i as u32,
        Ref::Node(i) => return Err(EncodeError::VocabOverflow { node: i }),
    })
}

/// Encodes every line of `p` as four tokens. No BOS or EOS is added; the
/// output is the last line (or `tokens` when there are no lines).
pub fn encode_program(p: &Program) -> Result<Vec<u32>, EncodeError> {
    if p.is_empty() && p.output() != Ref::Tokens {
        return Err(EncodeError::Unencodable);
    }
    let mut out = Vec::with_capacity(TOKENS_PER_LINE * p.len());
    for node in p.nodes() {
        let f = FUNCTION_BASE + node.function().index() as u32;
        let line = match *node {
            Node::Select { keys, queries, predicate } => {
                [f, ref_token(keys)?, ref_token(queries)?, PREDICATE_BASE + predicate.index() as u32]
            }
            Node::Aggregate { selector, sop } => [f, ref_token(selector)?, ref_token(sop)?, EMPTY],
            Node::SelectorWidth { selector } => [f, ref_token(selector)?, EMPTY, EMPTY],
            Node::Map { f: lam, sop } => [f, LAMBDA_BASE + lam.index() as u32, ref_token(sop)?, EMPTY],
            Node::SequenceMap { f: lam, lhs, rhs } => {
                [f, LAMBDA_BASE + lam.index() as u32, ref_token(lhs)?, ref_token(rhs)?]
            }
        };
        out.extend(line);
    }
    Ok(out)
}

/// Inverse of [`encode_program`], total over arbitrary token streams.
///
/// An optional leading BOS is skipped; the body ends at the first EOS or PAD
/// (or at the end of the stream) and must hold whole lines.
pub fn decode_program(tokens: &[u32]) -> Result<Program, DecodeError> {
    let err = |position: usize, reason: String| DecodeError { position, reason };
    let start = usize::from(tokens.first() == Some(&BOS));
    let end = tokens[start..].iter().position(|&t| t == EOS || t == PAD).map_or(tokens.len(), |i| start + i);
    let body = &tokens[start..end];
    if !body.len().is_multiple_of(TOKENS_PER_LINE) {
        let position = start + body.len() - body.len() % TOKENS_PER_LINE;
        return Err(err(position, format!("incomplete line of {} tokens", body.len() % TOKENS_PER_LINE)));
    }
    let mut nodes = Vec::with_capacity(body.len() / TOKENS_PER_LINE);
    for (line, chunk) in body.chunks(TOKENS_PER_LINE).enumerate() {
        let at = start + line * TOKENS_PER_LINE;
        let reference = |k: usize| -> Result<Ref, DecodeError> {
            let t = chunk[k];
            match t.checked_sub(REF_BASE) {
                Some(0) => Ok(Ref::Tokens),
                Some(1) => Ok(Ref::Indices),
                Some(v) if t < VOCAB_SIZE && ((v - 2) as usize) < line => Ok(Ref::Node((v - 2) as usize)),
                Some(v) if t < VOCAB_SIZE => {
                    Err(err(at + k, format!("var{} is not defined before line {}", v - 1, line + 1)))
                }
                _ => Err(err(at + k, format!("expected a reference, found {t}"))),
            }
        };
        let empty = |k: usize| -> Result<(), DecodeError> {
            if chunk[k] == EMPTY {
                Ok(())
            } else {
                Err(err(at + k, format!("expected the empty marker, found {}", chunk[k])))
            }
        };
        let lambda = |k: usize| chunk[k].checked_sub(LAMBDA_BASE).map(|i| i as usize);
        let function = chunk[0]
            .checked_sub(FUNCTION_BASE)
            .and_then(|i| Function::ALL.get(i as usize).copied())
            .ok_or_else(|| err(at, format!("expected a function, found {}", chunk[0])))?;
        let node = match function {
            Function::Select => {
                let predicate = chunk[3]
                    .checked_sub(PREDICATE_BASE)
                    .and_then(|i| Predicate::from_index(i as usize))
                    .ok_or_else(|| err(at + 3, format!("expected a predicate, found {}", chunk[3])))?;
                Node::Select { keys: reference(1)?, queries: reference(2)?, predicate }
            }
            Function::Aggregate => {
                let node = Node::Aggregate { selector: reference(1)?, sop: reference(2)? };
                empty(3)?;
                node
            }
            Function::SelectorWidth => {
                let node = Node::SelectorWidth { selector: reference(1)? };
                empty(2)?;
                empty(3)?;
                node
            }
            Function::Map => {
                let f = lambda(1)
                    .and_then(UnaryFn::from_index)
                    .ok_or_else(|| err(at + 1, format!("expected a unary lambda, found {}", chunk[1])))?;
                let node = Node::Map { f, sop: reference(2)? };
                empty(3)?;
                node
            }
            Function::SequenceMap => {
                let f = lambda(1)
                    .and_then(BinaryFn::from_index)
                    .ok_or_else(|| err(at + 1, format!("expected a binary lambda, found {}", chunk[1])))?;
                Node::SequenceMap { f, lhs: reference(2)?, rhs: reference(3)? }
            }
        };
        nodes.push(node);
        if let Err(e) = node_types(&nodes) {
            return Err(err(at, e.to_string()));
        }
    }
    Program::new(nodes).map_err(|e| err(end, e.to_string()))
}

/// Metadata carried in the header of a weight token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixHeader {
    pub role: Role,
    pub layer: usize,
    pub head: Option<usize>,
    pub rows: usize,
    pub cols: usize,
}

impl MatrixHeader {
    pub fn write(&self, out: &mut [f32]) {
        out[..HEADER_LEN].fill(0.0);
        out[self.role.index()] = 1.0;
        out[H_LAYER] = self.layer as f32;
        out[H_HEAD] = self.head.map_or(-1.0, |h| h as f32);
        out[H_ROWS] = self.rows as f32;
        out[H_COLS] = self.cols as f32;
    }

    /// Reads a header back from the start of `token`.
    pub fn parse(token: &[f32]) -> Result<MatrixHeader, String> {
        if token.len() < HEADER_LEN {
            return Err(format!("token of width {} is shorter than the header", token.len()));
        }
        let hot: Vec<usize> = (0..Role::ALL.len()).filter(|&i| token[i] != 0.0).collect();
        let role = match hot[..] {
            [i] if token[i] == 1.0 => Role::ALL[i],
            _ => return Err("role slots are not one-hot".into()),
        };
        let count = |slot: usize| -> Result<usize, String> {
            let v = token[slot];
            if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                Ok(v as usize)
            } else {
                Err(format!("header slot {slot} holds {v}, not a count"))
            }
        };
        let head = if token[H_HEAD] == -1.0 { None } else { Some(count(H_HEAD)?) };
        if token[H_COLS + 1..HEADER_LEN].iter().any(|&v| v != 0.0) {
            return Err("reserved header slots are not zero".into());
        }
        Ok(MatrixHeader { role, layer: count(H_LAYER)?, head, rows: count(H_ROWS)?, cols: count(H_COLS)? })
    }
}

/// Fails on the first matrix too large for a weight token.
pub fn check_budget(t: &CompiledTransformer) -> Result<(), EncodeError> {
    match t.matrices.iter().position(|m| m.rows * m.cols > MAX_PAYLOAD) {
        Some(index) => {
            Err(EncodeError::TokenBudgetExceeded { index, size: t.matrices[index].rows * t.matrices[index].cols })
        }
        None => Ok(()),
    }
}

/// One token per matrix, in the transformer's canonical matrix order.
pub fn encode_weights(t: &CompiledTransformer) -> Result<Vec<Vec<f32>>, EncodeError> {
    check_budget(t)?;
    Ok(t.matrices
        .iter()
        .map(|m| {
            let mut token = vec![0.0f32; WEIGHT_TOKEN_WIDTH];
            MatrixHeader { role: m.role, layer: m.layer, head: m.head, rows: m.rows, cols: m.cols }.write(&mut token);
            for (dst, &src) in token[HEADER_LEN..].iter_mut().zip(&m.data) {
                *dst = src as f32;
            }
            token
        })
        .collect())
}

/// Header and payload of a weight token, without its zero padding.
pub fn token_payload(token: &[f32]) -> Result<(MatrixHeader, &[f32]), String> {
    let h = MatrixHeader::parse(token)?;
    let end = HEADER_LEN + h.rows * h.cols;
    if end > token.len() {
        return Err(format!("{}x{} payload overruns a token of width {}", h.rows, h.cols, token.len()));
    }
    Ok((h, &token[HEADER_LEN..end]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::{compile, CompileConfig};
    use crate::rasp::{parse, Primitive, RaspConfig};

    fn sample() -> Program {
        parse(
            "var1 = Select(tokens, tokens, LT)\n\
             var2 = SelectorWidth(var1)\n\
             var3 = Map(lambda x: x - 1, var2)\n\
             var4 = SequenceMap(lambda x, y: x + y, var3, indices)\n\
             var5 = Select(var4, indices, EQ)\n\
             var6 = Aggregate(var5, tokens)\n\
             output = var6\n",
        )
        .unwrap()
    }

    #[test]
    fn golden_encoding() {
        let toks = encode_program(&sample()).unwrap();
        #[rustfmt::skip]
        let want = vec![
            4, 16, 16, 11,
            6, 18, 3, 3,
            7, 17, 19, 3,
            8, 16, 20, 17,
            4, 21, 17, 9,
            5, 22, 16, 3,
        ];
        assert_eq!(toks, want);
        assert_eq!(decode_program(&toks).unwrap(), sample());
    }

    #[test]
    fn framing_tokens_are_optional() {
        let mut toks = vec![BOS];
        toks.extend(encode_program(&sample()).unwrap());
        toks.extend([EOS, PAD, PAD, 31]);
        assert_eq!(decode_program(&toks).unwrap(), sample());
    }

    #[test]
    fn identity_round_trips() {
        let p = Program::identity(Primitive::Tokens);
        assert_eq!(encode_program(&p).unwrap(), Vec::<u32>::new());
        assert_eq!(decode_program(&[EOS]).unwrap(), p);
        assert_eq!(encode_program(&Program::identity(Primitive::Indices)), Err(EncodeError::Unencodable));
    }

    #[test]
    fn malformed_streams_report_positions() {
        let toks = encode_program(&sample()).unwrap();
        let pos = |t: &[u32]| decode_program(t).unwrap_err().position;
        // Truncated inside the third line.
        assert_eq!(pos(&toks[..10]), 8);
        // Line 2 refers to var2, which it defines itself.
        let mut fwd = toks.clone();
        fwd[5] = 19;
        assert_eq!(pos(&fwd), 5);
        // A lambda id past the unary library.
        let mut lam = toks.clone();
        lam[9] = 30;
        assert_eq!(pos(&lam), 9);
        // Map over a selector is ill-typed.
        let mut ty = toks.clone();
        ty[10] = 18;
        assert_eq!(pos(&ty), 8);
        // The last line is a selector.
        assert_eq!(pos(&toks[..20]), 20);
        // Out of vocabulary.
        assert_eq!(pos(&[4, 16, 16, 99]), 3);
    }

    #[test]
    fn weight_tokens_carry_their_header() {
        let p = parse(
            "var1 = Select(tokens, tokens, LT)\n\
             var2 = SelectorWidth(var1)\n\
             var3 = Map(lambda x: x - 1, var2)\n\
             output = var3\n",
        )
        .unwrap();
        let t = compile(&p, &RaspConfig::default(), &CompileConfig::default()).unwrap();
        let toks = encode_weights(&t).unwrap();
        assert_eq!(toks.len(), t.matrices.len());
        for (tok, m) in toks.iter().zip(&t.matrices) {
            assert_eq!(tok.len(), WEIGHT_TOKEN_WIDTH);
            let (h, payload) = token_payload(tok).unwrap();
            assert_eq!((h.role, h.layer, h.head, h.rows, h.cols), (m.role, m.layer, m.head, m.rows, m.cols));
            assert!(payload.iter().zip(&m.data).all(|(&a, &b)| a == b as f32));
            assert!(tok[HEADER_LEN + m.rows * m.cols..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn oversized_matrix_is_rejected() {
        let mut t = compile(&sample(), &RaspConfig::default(), &CompileConfig::default()).unwrap();
        let m = &mut t.matrices[3];
        m.rows = MAX_PAYLOAD + 1;
        m.cols = 1;
        m.data = vec![0.0; MAX_PAYLOAD + 1];
        assert_eq!(encode_weights(&t), Err(EncodeError::TokenBudgetExceeded { index: 3, size: MAX_PAYLOAD + 1 }));
    }

    #[test]
    fn header_parse_rejects_garbage() {
        let mut tok = vec![0.0f32; HEADER_LEN];
        assert!(MatrixHeader::parse(&tok).is_err());
        tok[2] = 1.0;
        tok[H_ROWS] = 2.5;
        assert!(MatrixHeader::parse(&tok).is_err());
        tok[H_ROWS] = 3.0;
        tok[H_HEAD] = -1.0;
        assert_eq!(MatrixHeader::parse(&tok).unwrap().head, None);
        tok[15] = 1.0;
        assert!(MatrixHeader::parse(&tok).is_err());
    }
}
