//! Tensor-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Each
//! recorded node owns its value; [`Tape::backward`] walks the nodes in exact
//! reverse recording order and accumulates `d loss / d node` into a gradient
//! buffer per node. Parameters enter the tape as leaves copied from
//! [`Tensor`]s and read their gradients back with [`Tape::grad`].
//!
//! Complex tensors are real tensors whose last axis has length 2 holding
//! `(re, im)`; every rule is therefore a real-valued rule on the two
//! components and no Wirtinger calculus is needed.

mod tape;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::bail;
use crate::Result;

pub use tape::{BatchStats, Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Dense `f64` array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            bail!(Shape, "shape {shape:?} needs {numel} values, got {}", values.len());
        }
        Ok(Self { shape: shape.to_vec(), values, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), values: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.values.fill(value);
        t
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.values.len() {
            bail!(Shape, "gradient of length {} for tensor of {}", delta.len(), self.values.len());
        }
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            None => self.grad = Some(delta.to_vec()),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
