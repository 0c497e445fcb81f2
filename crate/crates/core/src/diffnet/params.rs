//! Named parameter tensors with a stable iteration order.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::{Shape, Tensor};
use crate::error::DiffError;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<(), DiffError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(DiffError::Structure(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, DiffError> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, DiffError> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(DiffError::UnknownParam(name.to_string())),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn layout(&self) -> Vec<TensorInfo> {
        self.iter()
            .map(|(n, t)| TensorInfo {
                name: n.to_string(),
                shape: t.shape(),
            })
            .collect()
    }

    /// Store with the same names and shapes, every value zero.
    pub fn zeros_like(&self) -> Self {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            out.insert(n, Tensor::zeros(t.shape())).expect("names are unique");
        }
        out
    }

    /// Checks that `other` has the same names, order, and shapes.
    pub fn check_structure(&self, other: &ParamStore) -> Result<(), DiffError> {
        if self.len() != other.len() {
            return Err(DiffError::Structure(format!(
                "{} tensors vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.iter().zip(other.iter()) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(DiffError::Structure(format!(
                    "`{na}` {:?} vs `{nb}` {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Registers every tensor as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self.entries.iter().map(|(_, t)| g.leaf(t.clone())).collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Assembles a store with this layout from gradient values in `g`.
    pub fn collect(&self, g: &Graph, vars: &[Var]) -> ParamStore {
        let mut out = ParamStore::new();
        for ((n, _), v) in self.iter().zip(vars) {
            out.insert(n, g.value(*v).clone()).expect("names are unique");
        }
        out
    }

    pub(crate) fn push_uniform<R: Rng>(
        &mut self,
        rng: &mut R,
        name: String,
        shape: Shape,
        bound: f64,
    ) -> Result<(), DiffError> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Shape,
}

/// Graph handles for a bound [`ParamStore`], in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var, DiffError> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
