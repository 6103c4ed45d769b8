use std::collections::HashMap;

use super::ModelError;
use crate::numeric::{DType, Tensor};

/// Named tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_named<I>(named: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = (String, Tensor)>,
    {
        let mut set = Self::new();
        for (name, t) in named {
            set.insert(name, t)?;
        }
        Ok(set)
    }

    /// Appends a tensor. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), ModelError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ModelError::DuplicateTensor(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.get(name).ok_or_else(|| ModelError::MissingTensor(name.to_owned()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    /// Same names and shapes, all zeros, in `dtype`.
    pub fn zeros_like(&self, dtype: DType) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape(), dtype)))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Errors unless `other` has exactly the same names and shapes, in order.
    pub fn check_same_layout(&self, other: &ParameterSet) -> Result<(), ModelError> {
        if self.len() != other.len() {
            let missing = self
                .names()
                .find(|n| !other.contains(n))
                .or_else(|| other.names().find(|n| !self.contains(n)))
                .unwrap_or_default();
            return Err(ModelError::MissingTensor(missing.to_owned()));
        }
        for ((na, ta), (nb, tb)) in self.iter().zip(other.iter()) {
            if na != nb {
                return Err(ModelError::MissingTensor(na.to_owned()));
            }
            if ta.shape() != tb.shape() {
                return Err(ModelError::ShapeMismatch {
                    name: na.to_owned(),
                    expected: ta.shape().to_vec(),
                    found: tb.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}
