use serde::{Deserialize, Serialize};

use crate::error::{DattaError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Convolutional stem, positional encoding and class token.
    Embedding,
    /// Transformer encoder layer, 1-based.
    Encoder(usize),
    ActivityHead,
    DomainHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn scalar_count_where(&self, keep: impl Fn(&Param<T>) -> bool) -> usize {
        self.params.iter().filter(|p| keep(p)).map(|p| p.value.len()).sum()
    }

    /// Errors unless both stores hold the same names and shapes in order.
    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(DattaError::Shape(format!(
                "parameter count {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(DattaError::ShapeMismatch {
                    name: a.name.clone(),
                    expected: a.value.shape(),
                    found: b.value.shape(),
                });
            }
        }
        Ok(())
    }

    /// Euclidean distance between the two parameter vectors.
    pub fn distance(&self, other: &Self) -> T {
        self.params
            .iter()
            .zip(&other.params)
            .flat_map(|(a, b)| a.value.data().iter().zip(b.value.data()))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            .sqrt()
    }
}
