//! Named parameter store. Registration order is fixed by the model builder,
//! which makes SGD updates, checkpoint layout, and RNG consumption stable.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug)]
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Binds every parameter onto a tape, in registration order.
    pub fn bind_all(&self, tape: &mut Tape<S>) -> Result<Bound> {
        let mut vars = Vec::with_capacity(self.tensors.len());
        for (i, t) in self.tensors.iter().enumerate() {
            vars.push(tape.param(ParamId(i), t)?);
        }
        Ok(Bound { vars })
    }
}

/// Tape handles for every parameter of a store, indexed by `ParamId`.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Builds a binding from leaf vars created in `ParamId` order; used by the
    /// gradient checker, which binds parameter copies itself.
    pub fn from_vars(vars: &[Var]) -> Self {
        Bound { vars: vars.to_vec() }
    }

    pub fn v(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Gaussian-initialized matrix; draws are taken in f64 so 32-bit and 64-bit
/// builds consume identical RNG streams.
pub fn gaussian<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: f64) -> Tensor<S> {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            S::from_f64(z * sigma)
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized by construction")
}

pub fn zeros<S: Scalar>(rows: usize, cols: usize) -> Tensor<S> {
    Tensor::zeros(vec![rows, cols])
}

pub fn ones<S: Scalar>(rows: usize, cols: usize) -> Tensor<S> {
    Tensor::matrix(rows, cols, vec![S::ONE; rows * cols]).expect("sized by construction")
}
