use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::scalar::Scalar;
use crate::numerics::tape::Tape;
use crate::numerics::tensor::Tensor;

/// Named trainable tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamTable<S> {
    entries: IndexMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamTable<S> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    /// Registers a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        t.requires_grad = true;
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Gives every tracked parameter a zero gradient buffer.
    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            if t.requires_grad {
                t.grad = Some(vec![S::zero(); t.len()]);
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.grad = None;
        }
    }

    /// Adds the gradients collected on parameter leaves of `tape`.
    pub fn accumulate_grads(&mut self, tape: &Tape<S>) -> Result<()> {
        for (name, g) in tape.param_grads() {
            let t = self.get_mut(&name)?;
            match &mut t.grad {
                Some(acc) => kernels::axpy(S::one(), &g, acc),
                None => t.grad = Some(g),
            }
        }
        Ok(())
    }

    /// Marks every entry frozen.
    pub fn freeze(&mut self) {
        for t in self.entries.values_mut() {
            t.requires_grad = false;
            t.grad = None;
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.entries.values().all(|t| !t.requires_grad)
    }

    pub fn cast<T: Scalar>(&self) -> ParamTable<T> {
        ParamTable {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Sum of squared entries over all tracked parameters.
    pub fn l2_sq(&self) -> S {
        self.entries
            .values()
            .filter(|t| t.requires_grad)
            .map(Tensor::frobenius_sq)
            .sum()
    }
}
