//! Named parameter collections.

use std::collections::HashMap;

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

/// Ordered map from parameter name to tensor. Insertion order is preserved
/// and is the order gradients and optimizer state are laid out in.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<F = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Inserts or replaces `name`, returning its slot.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
            return i;
        }
        let i = self.names.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.tensors.push(tensor);
        i
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<usize, TensorError> {
        self.index_of(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn at(&self, i: usize) -> &Tensor<F> {
        &self.tensors[i]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Tensor<F> {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Copy of this set restricted to the names accepted by `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(&str) -> bool) -> Self {
        let mut out = Self::new();
        for (name, t) in self.iter() {
            if keep(name) {
                out.insert(name, t.clone());
            }
        }
        out
    }
}

impl ParamSet<f32> {
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self
                .iter()
                .all(|(name, t)| other.get(name).is_some_and(|o| t.bit_eq(o)))
    }
}
