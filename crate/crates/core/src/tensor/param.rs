use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

/// A learned tensor with a hierarchical name and a trainability flag.
///
/// A parameter with `trainable == false` never receives gradients and is
/// skipped by the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    name: String,
    tensor: Tensor<f32>,
    trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor<f32>) -> Self {
        Parameter {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
            trainable: true,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<f32> {
        &mut self.tensor
    }

    pub fn values(&self) -> &[f32] {
        self.tensor.data()
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.trainable = on;
        self.tensor.set_requires_grad(on);
    }

    /// Adds `g` into the gradient. Ignored for frozen parameters.
    pub fn accumulate_grad(&mut self, g: &[f32]) -> Result<()> {
        if !self.trainable {
            return Ok(());
        }
        self.tensor.accumulate_grad(g)
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.tensor.grad()
    }

    pub fn zero_grad(&mut self) {
        self.tensor.zero_grad();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Owned, ordered collection of parameters with unique names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, p: Parameter) -> Result<ParamId> {
        if self.index.contains_key(p.name()) {
            return Err(Error::Conflict(format!("duplicate parameter name `{}`", p.name())));
        }
        let id = ParamId(self.params.len());
        self.index.insert(p.name().to_string(), id);
        self.params.push(p);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.id_of(name).map(|id| &mut self.params[id.0])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}
