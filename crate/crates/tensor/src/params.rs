use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub group: String,
    pub trainable: bool,
}

/// Named parameter tensors, each tagged with a group. Trainability is
/// toggled per group by the training stage.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, group: impl Into<String>, tensor: Tensor<T>) {
        self.params.insert(
            name.into(),
            Param {
                tensor,
                group: group.into(),
                trainable: false,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<T>> {
        self.params.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn groups(&self) -> Vec<String> {
        let mut g: Vec<String> = self.params.values().map(|p| p.group.clone()).collect();
        g.sort();
        g.dedup();
        g
    }

    /// Marks exactly the parameters whose group satisfies `pred` as trainable.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for p in self.params.values_mut() {
            p.trainable = pred(&p.group);
        }
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// SHA-256 over names, shapes and little-endian payloads of every
    /// parameter whose group satisfies `pred`.
    pub fn digest(&self, pred: impl Fn(&str) -> bool) -> [u8; 32] {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, p) in &self.params {
            if !pred(&p.group) {
                continue;
            }
            h.update(name.as_bytes());
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &x in p.tensor.data() {
                x.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize().into()
    }

    pub fn group_digest(&self, group: &str) -> [u8; 32] {
        self.digest(|g| g == group)
    }
}
