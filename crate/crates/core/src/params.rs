//! Named parameter buffers.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Tape, Tensor, Var};

/// Ordered map from parameter name to buffer. Iteration order is the
/// lexicographic name order, which fixes checkpoint layout and optimizer
/// traversal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Total element count, optionally restricted to trainable buffers.
    pub fn count(&self, trainable_only: bool) -> usize {
        self.tensors
            .values()
            .filter(|t| !trainable_only || t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }

    pub fn same_names(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .keys()
                .zip(other.tensors.keys())
                .all(|(a, b)| a == b)
    }

    /// Marks every buffer whose name starts with `prefix` as (non-)trainable.
    pub fn set_trainable_prefix(&mut self, prefix: &str, flag: bool) {
        for (name, t) in &mut self.tensors {
            if name.starts_with(prefix) {
                t.set_requires_grad(flag);
            }
        }
    }

    /// Copies every buffer of `other` in, replacing existing entries.
    pub fn extend_from(&mut self, other: &ParamSet) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// Records every buffer on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.leaf(t)))
                .collect(),
        }
    }

    /// Moves gradients from a backward pass into the `grad` slots of the
    /// trainable buffers. Trainable buffers the loss does not reach get zeros.
    pub fn collect_grads(&mut self, bound: &Bound, grads: &mut Gradients) -> Result<()> {
        for (name, t) in &mut self.tensors {
            if !t.requires_grad() {
                t.clear_grad();
                continue;
            }
            let v = bound.var(name)?;
            let g = grads.take(v).unwrap_or_else(|| vec![0.0; t.numel()]);
            t.set_grad(g)?;
        }
        Ok(())
    }

    pub fn snap_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            t.snap_to_f32();
        }
    }

    /// Bitwise equality of every buffer's values.
    pub fn values_identical(&self, other: &ParamSet) -> bool {
        self.same_names(other)
            && self
                .tensors
                .values()
                .zip(other.tensors.values())
                .all(|(a, b)| {
                    a.shape() == b.shape()
                        && a.data()
                            .iter()
                            .zip(b.data())
                            .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

/// Tape handles for a [`ParamSet`], by name.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::State(format!("parameter {name} is not bound")))
    }
}
