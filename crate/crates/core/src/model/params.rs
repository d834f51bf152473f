use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A named learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    /// Whether weight decay applies.
    pub decay: bool,
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    lookup: HashMap<String, usize>,
}

impl<F> Default for ParamStore<F> {
    fn default() -> Self {
        Self {
            params: Vec::new(),
            lookup: HashMap::new(),
        }
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor<F>, decay: bool) {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        self.lookup.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, decay });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Param<F>> {
        self.index_of(name)
            .map(|i| &self.params[i])
            .ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn by_index(&self, i: usize) -> &Param<F> {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Param<F> {
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    decay: p.decay,
                })
                .collect(),
            lookup: self.lookup.clone(),
        }
    }
}
