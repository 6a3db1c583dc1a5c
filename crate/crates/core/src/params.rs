use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub id: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(id: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            id: id.into(),
            value,
            grad,
        }
    }
}

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameters. Order is insertion order and is
/// the serialization order of checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let id = id.into();
        if self.by_name.contains_key(&id) {
            return Err(Error::contract(format!("duplicate parameter id {id}")));
        }
        let idx = self.params.len();
        self.by_name.insert(id.clone(), idx);
        self.params.push(Parameter::new(id, value));
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.lookup(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// True when both sets hold the same ids, shapes and bitwise-equal values.
    pub fn bit_identical(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.id == b.id
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
