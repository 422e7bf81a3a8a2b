use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Learnable tensors keyed by hierarchical name (`enc.block3.ffn.w1`).
///
/// Iteration is lexicographic by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.params.insert(name, tensor.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Copies every parameter onto `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_with(tape, true)
    }

    /// Copies every parameter onto `tape` as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape<T>, track: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let mut t = t.clone();
                t.zero_grad();
                let v = if track { tape.param(t) } else { tape.constant(t) };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Adds the tape gradients of every bound parameter into the store.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bound: &Bound) -> Result<()> {
        for (name, &var) in &bound.vars {
            if let Some(g) = tape.grad(var)? {
                self.get_mut(name)?.accumulate_grad(g);
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
    }

    /// L2 norm over all gradient buffers.
    pub fn grad_norm(&self) -> f64 {
        libm::sqrt(
            self.params
                .values()
                .filter_map(|t| t.grad())
                .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
                .sum::<f64>(),
        )
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Names, values only; gradient buffers are ignored.
    pub fn same_values(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape() && a.data() == b.data())
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Looks up `prefix.suffix`.
    pub fn at(&self, prefix: &str, suffix: &str) -> Result<Var> {
        let mut name = String::with_capacity(prefix.len() + suffix.len() + 1);
        name.push_str(prefix);
        name.push('.');
        name.push_str(suffix);
        self.get(&name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn names(&self) -> Vec<&str> {
        self.vars.keys().map(String::as_str).collect()
    }
}
