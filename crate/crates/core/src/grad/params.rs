use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameters, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Concatenation of every parameter in name order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.size());
        for t in self.params.values() {
            out.extend_from_slice(t.values());
        }
        out
    }

    /// Overwrite values from a flat view laid out like [`ParamStore::flat`].
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.size() {
            return Err(Error::shape(
                "set_flat",
                format!("expected {} values, got {}", self.size(), flat.len()),
            ));
        }
        let mut offset = 0;
        for t in self.params.values_mut() {
            let n = t.len();
            t.values_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Places every parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        Bound { vars }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Loss value and its gradient with respect to every bound parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct GradRecord {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor>,
}

impl GradRecord {
    /// Gradient in the same flat layout as [`ParamStore::flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in self.grads.values() {
            out.extend_from_slice(t.values());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.grads.values().all(Tensor::is_finite)
    }
}
