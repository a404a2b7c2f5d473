use alloc::collections::BTreeMap;
use core::ops::Bound;
use alloc::string::String;

use crate::error::{validation, Result};
use crate::tensor::Tensor;

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| validation!("missing parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| validation!("missing parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Zero tensor for every entry whose name starts with `prefix`.
    pub fn zeros_like_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, t) in self.with_prefix(prefix) {
            out.insert(name.clone(), Tensor::zeros(t.shape()));
        }
        out
    }

    pub fn with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a String, &'a Tensor)> + 'a {
        self.tensors
            .range::<str, _>((Bound::Included(prefix), Bound::Unbounded))
            .take_while(move |(k, _)| k.starts_with(prefix))
    }

    /// Copies every `from*` entry to the same name under `to`.
    pub fn copy_prefix(&mut self, from: &str, to: &str) {
        let copies: alloc::vec::Vec<(String, Tensor)> = self
            .with_prefix(from)
            .map(|(k, t)| (alloc::format!("{to}{}", &k[from.len()..]), t.clone()))
            .collect();
        for (k, t) in copies {
            self.insert(k, t);
        }
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    /// Adds `other` into `self`; entries missing from `self` are inserted.
    pub fn accumulate(&mut self, other: &ParamSet) {
        for (name, t) in other.iter() {
            match self.tensors.get_mut(name) {
                Some(dst) => dst.add_assign(t),
                None => {
                    self.tensors.insert(name.clone(), t.clone());
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}
