use std::collections::BTreeMap;

use super::tensor::Tensor;

/// Named learnable parameters, ordered by name.
///
/// Values are kept in `f64` but every value written through [`Self::insert`]
/// or the optimizer is rounded to the nearest `f32`, so the 32-bit
/// checkpoint format reproduces a store bit-exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts `value` after rounding it to `f32` precision.
    pub fn insert(&mut self, name: impl Into<String>, mut value: Tensor) {
        round_to_f32(value.data_mut());
        self.params.insert(name.into(), value);
    }

    /// Inserts without rounding; used by gradient checks that perturb a
    /// parameter at full precision.
    pub fn insert_exact(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over all parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Scalar count over parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    /// Copies every parameter of `other` into `self`.
    pub fn extend_from(&mut self, other: &ParamStore) {
        for (k, v) in &other.params {
            self.params.insert(k.clone(), v.clone());
        }
    }
}

pub(crate) fn round_to_f32(data: &mut [f64]) {
    for v in data {
        *v = f64::from(*v as f32);
    }
}
