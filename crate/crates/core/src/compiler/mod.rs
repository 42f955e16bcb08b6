//! Lowering of RASP programs to explicit transformer weights, and a reference
//! forward pass over those weights.
//!
//! Matrices are aligned with the residual stream: matrices that read the
//! residual (`Query`, `Key`, `Value`, `MlpIn`) have one row per residual
//! dimension, and matrices that write it (`Output`, `MlpOut`, both
//! embeddings) have one column per residual dimension. No biases are used;
//! constant terms come from the residual's `one` dimension.

mod forward;
mod layout;
mod lower;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rasp::{InferConfig, Program, RaspConfig, SpecError};

pub use forward::ForwardError;
pub use layout::{ResidualLayout, Segment, SegmentOwner};
pub use lower::compile;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    TokenEmbed,
    PosEmbed,
    Query,
    Key,
    Value,
    Output,
    MlpIn,
    MlpOut,
}

impl Role {
    pub const ALL: [Role; 8] = [
        Role::TokenEmbed,
        Role::PosEmbed,
        Role::Query,
        Role::Key,
        Role::Value,
        Role::Output,
        Role::MlpIn,
        Role::MlpOut,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Role> {
        Self::ALL.get(i).copied()
    }

    pub fn is_attention(self) -> bool {
        matches!(self, Role::Query | Role::Key | Role::Value | Role::Output)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    pub role: Role,
    pub layer: usize,
    /// Present exactly for attention roles.
    pub head: Option<usize>,
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub data: Vec<f64>,
    /// Always `None` for compiled programs; kept for format completeness.
    pub bias: Option<Vec<f64>>,
}

impl WeightMatrix {
    pub fn zeros(role: Role, layer: usize, head: Option<usize>, rows: usize, cols: usize) -> Self {
        WeightMatrix { role, layer, head, rows, cols, data: vec![0.0; rows * cols], bias: None }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub(crate) fn add(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    /// Sort key of the canonical matrix order: layer, then role, then head.
    pub fn order_key(&self) -> (usize, usize, usize) {
        (self.layer, self.role.index(), self.head.unwrap_or(0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompileConfig {
    /// Score given to a matching (key, query) pair.
    pub attention_sharpness: f64,
    /// Largest magnitude any numeric value may reach.
    pub max_value_magnitude: f64,
    pub guard: Duration,
    pub infer: InferConfig,
}

impl Default for CompileConfig {
    fn default() -> Self {
        CompileConfig {
            attention_sharpness: 100.0,
            max_value_magnitude: 1e6,
            guard: Duration::from_secs(10),
            infer: InferConfig::default(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompileError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("var{}: {reason}", node + 1)]
    Unsupported { node: usize, reason: String },
    #[error("var{} holds values beyond the magnitude limit {limit}", node + 1)]
    ValueTooLarge { node: usize, limit: f64 },
    #[error("compilation exceeded the {0:?} guard")]
    GuardTimeout(Duration),
}

/// Sublayer slots a node occupies: slot `2l` is the attention of layer `l`,
/// slot `2l + 1` its MLP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub first_slot: usize,
    pub last_slot: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompiledTransformer {
    /// In canonical order (see [`WeightMatrix::order_key`]).
    pub matrices: Vec<WeightMatrix>,
    pub layout: ResidualLayout,
    pub n_layers: usize,
    pub source: Program,
    pub config: RaspConfig,
    /// Per node; `None` for `Select`, which is folded into its consumers.
    pub placements: Vec<Option<Placement>>,
}

/// Matrix counts of a compiled transformer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    /// Indexed like [`Role::ALL`].
    pub per_role: [usize; 8],
    pub heads: usize,
    pub mlp_layers: usize,
    pub total: usize,
}

impl CompiledTransformer {
    pub fn census(&self) -> Census {
        let mut c = Census::default();
        for m in &self.matrices {
            c.per_role[m.role.index()] += 1;
        }
        c.heads = c.per_role[Role::Query.index()];
        c.mlp_layers = c.per_role[Role::MlpIn.index()];
        c.total = self.matrices.len();
        c
    }

    /// (exactly-zero entries, all entries) over every matrix.
    pub fn zero_counts(&self) -> (usize, usize) {
        self.matrices
            .iter()
            .fold((0, 0), |(z, n), m| (z + m.data.iter().filter(|&&x| x == 0.0).count(), n + m.data.len()))
    }
}

pub fn matrix_census(t: &CompiledTransformer) -> Census {
    t.census()
}
