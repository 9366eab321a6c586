use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use crate::error::{invalid, Result};
use crate::numcore::DenseMatrix;
use crate::Scalar;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named tensor with its gradient and Adam moment buffers.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: DenseMatrix<T>,
    pub grad: DenseMatrix<T>,
    pub(crate) first_moment: DenseMatrix<T>,
    pub(crate) second_moment: DenseMatrix<T>,
}

/// Named parameters in insertion order. Vectors are stored as `n x 1`
/// matrices.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
    step: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseMatrix<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(invalid(format!("duplicate parameter name `{name}`")));
        }
        let (r, c) = value.shape();
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: DenseMatrix::zeros(r, c),
            first_moment: DenseMatrix::zeros(r, c),
            second_moment: DenseMatrix::zeros(r, c),
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &DenseMatrix<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut DenseMatrix<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &DenseMatrix<T> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut DenseMatrix<T> {
        &mut self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn advance_step(&mut self) {
        self.step += 1;
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.as_slice().len()).sum()
    }

    /// Order-sensitive hash over every parameter's name, shape and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in &self.params {
            p.name.hash(&mut h);
            p.value.shape().hash(&mut h);
            for v in p.value.as_slice() {
                v.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// True when both stores hold the same names, shapes and bit-identical
    /// values.
    pub fn values_bit_equal(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a
                        .value
                        .as_slice()
                        .iter()
                        .zip(b.value.as_slice())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }
}
