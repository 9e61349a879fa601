use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph};
use crate::tensor::Tensor;

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamKind {
    /// Buffers (running statistics) are stored but never receive gradients.
    pub trainable: bool,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
    pub group: ParamGroup,
}

impl ParamKind {
    pub const fn weight(group: ParamGroup) -> Self {
        ParamKind { trainable: true, decay: true, group }
    }

    pub const fn no_decay(group: ParamGroup) -> Self {
        ParamKind { trainable: true, decay: false, group }
    }

    pub const fn buffer(group: ParamGroup) -> Self {
        ParamKind { trainable: false, decay: false, group }
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub kind: ParamKind,
}

/// Named parameter tensors with additive gradient accumulators.
///
/// Each store carries a unique id so one graph can bind several stores
/// (student, EMA copy, frozen teacher) without mixing their leaves. Cloning
/// a store yields a fresh id.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    frozen: bool,
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            uid: next_uid(),
            frozen: self.frozen,
            entries: self.entries.clone(),
            by_name: self.by_name.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { uid: next_uid(), frozen: false, entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    /// A frozen store binds its parameters as constants in every graph.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = ParamId(self.entries.len());
        let grad = Tensor::zeros(value.shape());
        self.entries.push(ParamEntry { name: name.clone(), value: value.with_requires_grad(false), grad, kind });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_value",
                lhs: e.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        e.value = value.with_requires_grad(false);
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub(crate) fn is_tracked(&self, id: ParamId) -> bool {
        !self.frozen && self.entries[id.0].kind.trainable
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.scale_assign(0.0);
        }
    }

    /// Adds the gradients of this store's leaves bound in `graph`.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients) {
        for (id, var) in graph.bound_params(self.uid) {
            if let Some(g) = grads.get(var) {
                self.entries[id.0].grad.add_assign(g);
            }
        }
    }

    /// Total number of scalars across all entries.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}
