//! Layer building blocks: the parameter container, the forward/backward
//! contract and the concrete layers used by the forecasting model.

pub mod batchnorm;
pub mod dropout;
pub mod kan;
pub mod linear;
pub mod revin;

pub use batchnorm::BatchNorm1d;
pub use dropout::Dropout;
pub use kan::{KanCache, KanLayer, KanVariant};
pub use linear::{Linear, LinearCache};
pub use revin::{RevIn, RevInStats};

use crate::tensor::Tensor;

/// Train or eval behaviour for layers that differ between the two.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A learnable tensor together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Read-only and mutable access to every named parameter of a component.
///
/// Both visitors must report parameters in the same order; optimizers and
/// checkpoints rely on it. Mutable access invalidates outstanding forward
/// caches, since the caller may change parameter values.
pub trait Parameters {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>);

    fn zero_grad(&mut self) {
        let mut ps = Vec::new();
        self.params_mut("", &mut ps);
        for (_, p) in ps {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        let mut ps = Vec::new();
        self.params("", &mut ps);
        ps.iter().map(|(_, p)| p.value.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Gradients produced by a layer's backward pass: the input cotangent plus
/// one tensor per parameter, in [`Parameters`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub d_input: Tensor,
    pub d_params: Vec<Tensor>,
}

impl LayerGrads {
    /// Adds `d_params` into the matching `Param::grad` slots.
    pub fn accumulate_into(&self, params: Vec<&mut Param>) -> crate::Result<()> {
        if params.len() != self.d_params.len() {
            return Err(crate::Error::contract(format!(
                "{} gradients for {} parameters",
                self.d_params.len(),
                params.len()
            )));
        }
        for (p, g) in params.into_iter().zip(&self.d_params) {
            p.grad.add_assign(g)?;
        }
        Ok(())
    }
}

/// Monotone counter used to tag forward caches with the parameter state
/// they were computed from.
pub(crate) fn next_version() -> u64 {
    use std::sync::atomic::{AtomicU64, Ordering};
    static COUNTER: AtomicU64 = AtomicU64::new(1);
    COUNTER.fetch_add(1, Ordering::Relaxed)
}
