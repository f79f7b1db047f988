//! Named, hierarchically addressed learnable tensors.
//!
//! Model code never owns tensors directly: it holds [`ParamId`] handles into a
//! [`ParamStore`], and at forward time the store is bound onto a tape so each
//! handle resolves to a [`Var`].

use std::collections::HashMap;
use std::ops::Index;

use numcore::{Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Generator,
    Discriminator,
}

impl ParamGroup {
    /// Group implied by a parameter name.
    pub fn of_name(name: &str) -> Self {
        if name.starts_with("disc.") {
            ParamGroup::Discriminator
        } else {
            ParamGroup::Generator
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the parameter called `name`, creating it with `init` when
    /// absent. An existing parameter must already have `shape`.
    pub fn param(&mut self, name: &str, shape: &[usize], init: impl FnOnce() -> Result<Tensor>) -> Result<ParamId> {
        if let Some(&i) = self.index.get(name) {
            if self.tensors[i].shape() != shape {
                return Err(Error::config(format!(
                    "parameter {name} has shape {:?}, model expects {shape:?}",
                    self.tensors[i].shape()
                )));
            }
            return Ok(ParamId(i));
        }
        let t = init()?;
        if t.shape() != shape {
            return Err(Error::contract(format!("initializer for {name} produced {:?}", t.shape())));
        }
        self.insert(name.to_string(), t)
    }

    pub fn insert(&mut self, name: String, tensor: Tensor) -> Result<ParamId> {
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        ParamGroup::of_name(&self.names[id.0])
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total scalar count of the parameters in `group`.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.iter()
            .filter(|(_, n, _)| ParamGroup::of_name(n) == group)
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    /// Places every parameter on `tape`: those in `trainable` groups as
    /// gradient-receiving leaves, the rest as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: &[ParamGroup]) -> Bound {
        let vars = self
            .iter()
            .map(|(_, name, t)| {
                if trainable.contains(&ParamGroup::of_name(name)) {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// A [`ParamStore`] resolved onto one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Weight initializers used by the model builders.
pub(crate) mod init {
    use super::*;

    /// He-normal: `N(0, 2 / fan_in)`.
    pub fn he<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Result<Tensor> {
        Ok(Tensor::randn(shape.to_vec(), (2.0 / fan_in as f64).sqrt(), rng)?)
    }

    /// `N(0, std²)`.
    pub fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Result<Tensor> {
        Ok(Tensor::randn(shape.to_vec(), std, rng)?)
    }

    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::zeros(shape.to_vec())?)
    }

    pub fn ones(shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::ones(shape.to_vec())?)
    }
}
