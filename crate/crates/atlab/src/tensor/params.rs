//! Named parameter storage, kept outside the tape.
//!
//! Parameters live in a [`ParamSet`] across training steps; each forward
//! pass copies them onto a fresh tape as gradient-tracked leaves, and after
//! `backward` the leaf gradients are pulled back into a [`GradBuffer`] keyed
//! by the same ids. The optimizer then updates the `ParamSet` in place.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stable handle into a [`ParamSet`]. Ids are assigned in insertion order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Insertion-order index; also the position of this parameter's tape
    /// leaf in a bound-parameter vector.
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered, name-unique collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter; names must be unique within the set.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Parameter(format!("duplicate parameter name {name:?}")));
        }
        self.params.push(Param { name, value });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Per-parameter gradient accumulator, shaped like a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct GradBuffer {
    grads: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn zeros_like(params: &ParamSet) -> Self {
        GradBuffer { grads: params.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect() }
    }

    pub fn accumulate(&mut self, id: ParamId, delta: &[f64]) -> Result<()> {
        let slot = &mut self.grads[id.0];
        if slot.len() != delta.len() {
            return Err(Error::Shape(format!(
                "gradient length {} does not match parameter size {}",
                delta.len(),
                slot.len()
            )));
        }
        for (a, b) in slot.iter_mut().zip(delta) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            for v in g.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn reset(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }
}
