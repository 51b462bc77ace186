//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Model code is written once against the [`Backend`] trait. [`Tape`] records
//! every primitive for a later [`Tape::backward`] pass; [`Eval`] computes the
//! same values without keeping a graph.

mod prim;
mod tape;
mod tensor;

use std::collections::HashMap;
use std::rc::Rc;

pub use prim::{lincomb, sigmoid, softplus, Prim};
pub use tape::{Grads, NodeId, Tape};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op} does not support rank of shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("{op} expects {expected} inputs, got {found}")]
    Arity { op: &'static str, expected: usize, found: usize },
    #[error("{op} on an empty tensor")]
    Empty { op: &'static str },
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, DiffError>;

/// A computation mode: values only, or values plus a recorded graph.
pub trait Backend {
    type T: Clone;

    /// Applies a primitive to already-built values.
    fn apply(&mut self, prim: Prim, inputs: &[&Self::T]) -> Result<Self::T>;
    /// A value that receives no gradient.
    fn constant(&mut self, t: Tensor) -> Self::T;
    /// A named trainable leaf. Repeated calls with one name return the same leaf.
    fn param(&mut self, name: &str, init: impl FnOnce() -> Tensor) -> Self::T;
    fn value<'a>(&'a self, x: &'a Self::T) -> &'a Tensor;

    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T> {
        self.apply(Prim::MatMul, &[a, b])
    }
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T> {
        self.apply(Prim::Add, &[a, b])
    }
    fn sub(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T> {
        self.apply(Prim::Sub, &[a, b])
    }
    fn mul(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T> {
        self.apply(Prim::Mul, &[a, b])
    }
    fn div(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T> {
        self.apply(Prim::Div, &[a, b])
    }
    fn scale(&mut self, a: &Self::T, s: f64) -> Result<Self::T> {
        self.apply(Prim::Scale(s), &[a])
    }
    fn add_scalar(&mut self, a: &Self::T, s: f64) -> Result<Self::T> {
        self.apply(Prim::AddScalar(s), &[a])
    }
    fn tanh(&mut self, a: &Self::T) -> Result<Self::T> {
        self.apply(Prim::Tanh, &[a])
    }
    fn sigmoid(&mut self, a: &Self::T) -> Result<Self::T> {
        self.apply(Prim::Sigmoid, &[a])
    }
    fn relu(&mut self, a: &Self::T) -> Result<Self::T> {
        self.apply(Prim::Relu, &[a])
    }
    fn softplus(&mut self, a: &Self::T) -> Result<Self::T> {
        self.apply(Prim::Softplus, &[a])
    }
    fn exp(&mut self, a: &Self::T) -> Result<Self::T> {
        self.apply(Prim::Exp, &[a])
    }
    fn log(&mut self, a: &Self::T) -> Result<Self::T> {
        self.apply(Prim::Log, &[a])
    }
    fn sqrt(&mut self, a: &Self::T) -> Result<Self::T> {
        self.apply(Prim::Sqrt, &[a])
    }
    fn square(&mut self, a: &Self::T) -> Result<Self::T> {
        self.apply(Prim::Square, &[a])
    }
    fn concat(&mut self, parts: &[&Self::T]) -> Result<Self::T> {
        self.apply(Prim::Concat, parts)
    }
    fn concat_rows(&mut self, parts: &[&Self::T]) -> Result<Self::T> {
        self.apply(Prim::ConcatRows, parts)
    }
    fn slice(&mut self, a: &Self::T, start: usize, len: usize) -> Result<Self::T> {
        self.apply(Prim::Slice { start, len }, &[a])
    }
    fn sum(&mut self, a: &Self::T) -> Result<Self::T> {
        self.apply(Prim::Sum, &[a])
    }
    fn mean(&mut self, a: &Self::T) -> Result<Self::T> {
        self.apply(Prim::Mean, &[a])
    }
    fn sum_last(&mut self, a: &Self::T) -> Result<Self::T> {
        self.apply(Prim::SumLast, &[a])
    }
    fn mean_blocks(&mut self, a: &Self::T, blocks: usize) -> Result<Self::T> {
        self.apply(Prim::MeanBlocks(blocks), &[a])
    }
    fn gather_rows(&mut self, a: &Self::T, rows: Vec<usize>) -> Result<Self::T> {
        self.apply(Prim::GatherRows(rows), &[a])
    }
    fn lincomb(&mut self, base: &Self::T, terms: &[(f64, &Self::T)]) -> Result<Self::T> {
        let coeffs = terms.iter().map(|(c, _)| *c).collect();
        let mut inputs = Vec::with_capacity(terms.len() + 1);
        inputs.push(base);
        inputs.extend(terms.iter().map(|(_, t)| *t));
        self.apply(Prim::LinComb(coeffs), &inputs)
    }
}

/// Plain evaluation: no graph, intermediates are freed as soon as unused.
/// Parameters are cached by name on first use, so build a new `Eval` after
/// changing parameter values.
#[derive(Default)]
pub struct Eval {
    params: HashMap<String, Rc<Tensor>>,
}

impl Eval {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Backend for Eval {
    type T = Rc<Tensor>;

    fn apply(&mut self, prim: Prim, inputs: &[&Self::T]) -> Result<Self::T> {
        let vals: Vec<&Tensor> = inputs.iter().map(|t| t.as_ref()).collect();
        prim.forward(&vals).map(Rc::new)
    }

    fn constant(&mut self, t: Tensor) -> Self::T {
        Rc::new(t)
    }

    fn param(&mut self, name: &str, init: impl FnOnce() -> Tensor) -> Self::T {
        self.params.entry(name.to_string()).or_insert_with(|| Rc::new(init())).clone()
    }

    fn value<'a>(&'a self, x: &'a Self::T) -> &'a Tensor {
        x
    }
}
