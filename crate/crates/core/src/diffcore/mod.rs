//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] is rebuilt for every evaluation (define-by-run). Leaves are
//! either constants or views of a [`ParamStore`] slot; [`Tape::backward`]
//! walks the recorded nodes once in reverse order and returns a
//! [`GradBuffer`] aligned index-for-index with the parameter vector.
//!
//! Operations that need bespoke derivatives (hash-grid lookups, the
//! compositor, the spiking gate) plug in through [`TapeOp`].

mod check;
mod tape;
mod tensor;

pub use check::{grad_check, CheckStatus, CoordCheck, GradCheckOptions, GradCheckReport};
pub use tape::{BackwardCtx, NodeId, Tape, TapeOp};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};

/// Index of a named tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// A flat parameter vector partitioned into named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    values: Vec<f64>,
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor. `init` must hold exactly `shape.iter().product()` values.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Vec<f64>) -> ParamId {
        let len: usize = shape.iter().product();
        assert_eq!(len, init.len(), "parameter `{name}` init length mismatch");
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: self.values.len(),
            len,
        });
        self.values.extend(init);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id.0];
        &self.values[e.offset..e.offset + e.len]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let e = &self.entries[id.0];
        &mut self.values[e.offset..e.offset + e.len]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }
}

/// Accumulated gradients, aligned with a [`ParamStore`]'s flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBuffer {
    data: Vec<f64>,
}

impl GradBuffer {
    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn param<'a>(&'a self, store: &ParamStore, id: ParamId) -> &'a [f64] {
        let e = store.entry(id);
        &self.data[e.offset..e.offset + e.len]
    }

    pub fn param_mut<'a>(&'a mut self, store: &ParamStore, id: ParamId) -> &'a mut [f64] {
        let e = store.entry(id);
        &mut self.data[e.offset..e.offset + e.len]
    }

    pub fn zero(&mut self) {
        self.data.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn add_assign(&mut self, other: &GradBuffer) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Sums shard buffers in the order given. The fixed order keeps the result
    /// bit-identical regardless of how the shards were scheduled.
    pub fn reduce_in_order<'a>(shards: impl IntoIterator<Item = &'a GradBuffer>) -> Option<Self> {
        let mut iter = shards.into_iter();
        let mut acc = iter.next()?.clone();
        for shard in iter {
            acc.add_assign(shard);
        }
        Some(acc)
    }
}
