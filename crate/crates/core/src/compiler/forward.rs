use thiserror::Error;

use super::{CompiledTransformer, Role, WeightMatrix};
use crate::rasp::{check_input, EvalError, Value, ValueKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForwardError {
    #[error(transparent)]
    Input(#[from] EvalError),
    #[error("malformed weights: {0}")]
    Shape(String),
}

struct Layer<'a> {
    heads: Vec<[&'a WeightMatrix; 4]>,
    mlp: Option<(&'a WeightMatrix, &'a WeightMatrix)>,
}

impl CompiledTransformer {
    /// Runs the transformer on `input` and decodes the output segment.
    pub fn forward(&self, input: &[u8]) -> Result<Vec<Value>, ForwardError> {
        self.forward_ablated(input, &[])
    }

    /// Like [`forward`](Self::forward), but zeroes the residual dimensions in
    /// `ablate` after the embedding and after every sublayer.
    pub fn forward_ablated(&self, input: &[u8], ablate: &[usize]) -> Result<Vec<Value>, ForwardError> {
        let x = self.residual(input, ablate)?;
        Ok(self.readout(&x))
    }

    /// Final residual stream, one row per position (row 0 is BOS).
    pub fn residual(&self, input: &[u8], ablate: &[usize]) -> Result<Vec<Vec<f64>>, ForwardError> {
        check_input(&self.config, input)?;
        let d = self.layout.total_dim;
        let (te, pe) = self.embedding_matrices()?;
        let layers = self.layers()?;

        let n = input.len() + 1;
        let mut x = vec![vec![0.0; d]; n];
        for (pos, row) in x.iter_mut().enumerate() {
            let tok = if pos == 0 { 0 } else { 1 + input[pos - 1] as usize };
            axpy(row, 1.0, &te.data[tok * d..(tok + 1) * d]);
            axpy(row, 1.0, &pe.data[pos * d..(pos + 1) * d]);
        }
        zero(&mut x, ablate);

        for layer in &layers {
            if !layer.heads.is_empty() {
                let mut delta = vec![vec![0.0; d]; n];
                for [wq, wk, wv, wo] in &layer.heads {
                    let q = matmul(&x, wq);
                    let k = matmul(&x, wk);
                    let v = matmul(&x, wv);
                    for (qi, out) in q.iter().zip(delta.iter_mut()) {
                        let scores: Vec<f64> = k.iter().map(|kj| dot(qi, kj)).collect();
                        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                        let total: f64 = weights.iter().sum();
                        let mut mixed = vec![0.0; wv.cols];
                        for (w, vj) in weights.iter().zip(&v) {
                            axpy(&mut mixed, w / total, vj);
                        }
                        let written = matmul(std::slice::from_ref(&mixed), wo);
                        axpy(out, 1.0, &written[0]);
                    }
                }
                for (row, dr) in x.iter_mut().zip(&delta) {
                    axpy(row, 1.0, dr);
                }
                zero(&mut x, ablate);
            }
            if let Some((w_in, w_out)) = layer.mlp {
                let mut h = matmul(&x, w_in);
                for row in &mut h {
                    for v in row.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
                let out = matmul(&h, w_out);
                for (row, dr) in x.iter_mut().zip(&out) {
                    axpy(row, 1.0, dr);
                }
                zero(&mut x, ablate);
            }
        }
        Ok(x)
    }

    /// Decodes the output segment at every non-BOS position.
    pub fn readout(&self, x: &[Vec<f64>]) -> Vec<Value> {
        let seg = self.layout.of_ref(self.source.output()).expect("output segment");
        x[1..]
            .iter()
            .map(|row| match seg.kind {
                ValueKind::Categorical => {
                    let slice = &row[seg.dims()];
                    let best = (0..slice.len()).fold(0, |b, i| if slice[i] > slice[b] { i } else { b });
                    seg.values[best]
                }
                ValueKind::Boolean => Value::Bool(row[seg.start] > 0.5),
                ValueKind::Numerical => Value::num(row[seg.start]),
            })
            .collect()
    }

    fn embedding_matrices(&self) -> Result<(&WeightMatrix, &WeightMatrix), ForwardError> {
        let d = self.layout.total_dim;
        let find = |role: Role, rows: usize| {
            let m = self
                .matrices
                .iter()
                .find(|m| m.role == role)
                .ok_or_else(|| ForwardError::Shape(format!("missing {role:?}")))?;
            if m.rows != rows || m.cols != d || m.data.len() != rows * d {
                return Err(ForwardError::Shape(format!("{role:?} is {}x{}, expected {rows}x{d}", m.rows, m.cols)));
            }
            Ok(m)
        };
        Ok((
            find(Role::TokenEmbed, self.config.vocab_size as usize + 1)?,
            find(Role::PosEmbed, self.config.max_seq_len + 1)?,
        ))
    }

    fn layers(&self) -> Result<Vec<Layer<'_>>, ForwardError> {
        let d = self.layout.total_dim;
        let shape = |msg: String| ForwardError::Shape(msg);
        let mut layers = Vec::with_capacity(self.n_layers);
        for l in 0..self.n_layers {
            let at = |role: Role, head: Option<usize>| {
                self.matrices.iter().find(|m| m.layer == l && m.role == role && m.head == head)
            };
            let mut heads = Vec::new();
            for q in self.matrices.iter().filter(|m| m.layer == l && m.role == Role::Query) {
                let get =
                    |role| at(role, q.head).ok_or_else(|| shape(format!("layer {l} head {:?} lacks {role:?}", q.head)));
                let (k, v, o) = (get(Role::Key)?, get(Role::Value)?, get(Role::Output)?);
                let ok =
                    q.rows == d && k.rows == d && v.rows == d && q.cols == k.cols && o.rows == v.cols && o.cols == d;
                if !ok {
                    return Err(shape(format!("layer {l} head {:?} has inconsistent shapes", q.head)));
                }
                heads.push([q, k, v, o]);
            }
            let mlp = match (at(Role::MlpIn, None), at(Role::MlpOut, None)) {
                (Some(a), Some(b)) if a.rows == d && a.cols == b.rows && b.cols == d => Some((a, b)),
                (None, None) => None,
                _ => return Err(shape(format!("layer {l} has a malformed MLP"))),
            };
            layers.push(Layer { heads, mlp });
        }
        for m in &self.matrices {
            if m.data.len() != m.rows * m.cols {
                return Err(shape(format!("{:?} data length {} != {}x{}", m.role, m.data.len(), m.rows, m.cols)));
            }
        }
        Ok(layers)
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x * m`, skipping zero entries of `x` (residual rows are mostly zero).
fn matmul(x: &[Vec<f64>], m: &WeightMatrix) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let mut out = vec![0.0; m.cols];
            for (r, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    axpy(&mut out, v, &m.data[r * m.cols..(r + 1) * m.cols]);
                }
            }
            out
        })
        .collect()
}

fn zero(x: &mut [Vec<f64>], dims: &[usize]) {
    for row in x {
        for &d in dims {
            row[d] = 0.0;
        }
    }
}
