use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};

use crate::{checkpoint, Real, Result, Tensor, TensorError};

/// Gradients keyed by parameter name.
pub type GradMap<T = f32> = BTreeMap<String, Tensor<T>>;

/// Named parameter tensors with per-name trainable flags.
///
/// Iteration order is the lexicographic order of names, which fixes the
/// order of every reduction and serialization that walks the store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    entries: BTreeMap<String, Tensor<T>>,
    frozen: BTreeSet<String>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    /// Inserts (or replaces) a trainable parameter.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        self.frozen.remove(&name);
        self.entries.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.frozen.remove(name);
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.contains_key(name) && !self.frozen.contains(name)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        if trainable {
            self.frozen.remove(name);
        } else if self.entries.contains_key(name) {
            self.frozen.insert(name.to_string());
        }
    }

    /// Makes exactly the names under one of `prefixes` trainable and freezes the rest.
    pub fn apply_freeze_mask(&mut self, prefixes: &[&str]) {
        self.frozen = self
            .entries
            .keys()
            .filter(|n| !prefixes.iter().any(|p| n.starts_with(p)))
            .cloned()
            .collect();
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .keys()
            .filter(|n| !self.frozen.contains(*n))
            .cloned()
            .collect()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Copies every entry of `other` into `self`, keeping `other`'s trainable flags.
    pub fn merge(&mut self, other: &ParamStore<T>) {
        for (name, value) in other.iter() {
            self.entries.insert(name.to_string(), value.clone());
            self.set_trainable(name, other.is_trainable(name));
        }
    }

    /// Entries whose name starts with `prefix`, as a new store.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, value) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.insert(name, value.clone());
            out.set_trainable(name, self.is_trainable(name));
        }
        out
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            frozen: self.frozen.clone(),
        }
    }

    /// Checkpoint bytes of the entries under `prefix`.
    pub fn to_bytes_prefix(&self, prefix: &str) -> Vec<u8> {
        checkpoint::to_bytes(&self.subset(prefix))
    }

    /// Hex SHA-256 of the checkpoint bytes of the entries under `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        hex::encode(Sha256::digest(self.to_bytes_prefix(prefix)))
    }
}
