use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Never receives gradients (frozen weights).
    Frozen,
    /// Running statistics; updated outside the optimizer.
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry<T: Real> {
    name: String,
    kind: ParamKind,
    value: Tensor<T>,
}

/// Ordered, named collection of model tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real = f32> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Entry { name, kind, value });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].kind == ParamKind::Trainable
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.dims() != value.dims() {
            return Err(TensorError::Shape(format!(
                "parameter `{}` has dims {:?}, replacement has {:?}",
                slot.name,
                slot.value.dims(),
                value.dims()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, ParamKind, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), e.kind, &e.value))
    }

    /// Number of scalar values, optionally restricted to one kind.
    pub fn count(&self, kind: Option<ParamKind>) -> usize {
        self.entries
            .iter()
            .filter(|e| kind.is_none_or(|k| k == e.kind))
            .map(|e| e.value.len())
            .sum()
    }

    /// SHA-256 over names, dims and little-endian values of every tensor whose
    /// name starts with `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            h.update(e.name.as_bytes());
            for &d in e.value.dims() {
                h.update((d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
