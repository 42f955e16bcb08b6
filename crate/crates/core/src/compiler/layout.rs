use serde::{Deserialize, Serialize};

use crate::rasp::{Ref, Value, ValueKind};

/// What a residual segment holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentOwner {
    /// Constant 1 at every position.
    One,
    /// 1 at the BOS position only.
    Bos,
    Tokens,
    Indices,
    Node(usize),
    /// Intermediate values of a multi-stage node.
    Scratch {
        node: usize,
        part: u8,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub owner: SegmentOwner,
    pub kind: ValueKind,
    pub start: usize,
    pub len: usize,
    /// Value of each dimension for categorical segments; empty otherwise.
    pub values: Vec<Value>,
}

impl Segment {
    pub fn dims(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }

    /// Dimension holding `v` in a categorical segment.
    pub fn dim_of(&self, v: &Value) -> Option<usize> {
        self.values.binary_search(v).ok().map(|i| self.start + i)
    }
}

/// Partition of the residual stream into disjoint segments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualLayout {
    pub segments: Vec<Segment>,
    pub total_dim: usize,
}

impl ResidualLayout {
    pub const ONE: usize = 0;
    pub const BOS: usize = 1;

    pub(crate) fn new() -> Self {
        let mut l = ResidualLayout { segments: Vec::new(), total_dim: 0 };
        l.push(SegmentOwner::One, ValueKind::Numerical, Vec::new());
        l.push(SegmentOwner::Bos, ValueKind::Boolean, Vec::new());
        l
    }

    /// Appends a segment: one dimension per value for categorical kinds, a
    /// single dimension otherwise.
    pub(crate) fn push(&mut self, owner: SegmentOwner, kind: ValueKind, values: Vec<Value>) {
        let len = if kind == ValueKind::Categorical { values.len() } else { 1 };
        let values = if kind == ValueKind::Categorical { values } else { Vec::new() };
        self.segments.push(Segment { owner, kind, start: self.total_dim, len, values });
        self.total_dim += len;
    }

    pub fn segment(&self, owner: SegmentOwner) -> Option<&Segment> {
        self.segments.iter().find(|s| s.owner == owner)
    }

    pub fn of_ref(&self, r: Ref) -> Option<&Segment> {
        self.segment(match r {
            Ref::Tokens => SegmentOwner::Tokens,
            Ref::Indices => SegmentOwner::Indices,
            Ref::Node(i) => SegmentOwner::Node(i),
        })
    }
}
