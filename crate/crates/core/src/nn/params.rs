use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::tape::{Grads, Tape, Var};
use super::tensor::Tensor;
use crate::real::Real;

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Shape record used by checkpoints to validate weight blobs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: [usize; 5],
}

/// Ordered parameter list of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new(params: Vec<Param<T>>) -> Self {
        ParamStore { params }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn info(&self) -> Vec<ParamInfo> {
        self.params
            .iter()
            .map(|p| ParamInfo {
                name: p.name.clone(),
                shape: p.tensor.shape(),
            })
            .collect()
    }

    /// Places every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), requires_grad))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }

    /// Concatenation of all values (checkpoint blob order).
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.count());
        for p in &self.params {
            out.extend_from_slice(p.tensor.data());
        }
        out
    }

    /// Overwrites all values from a flat slice in declaration order; returns
    /// `false` when the length does not match.
    pub fn load_flat(&mut self, flat: &[T]) -> bool {
        if flat.len() != self.count() {
            return false;
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.tensor.numel();
            p.tensor.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        true
    }

    /// Gradients for `bound` (as returned by [`ParamStore::bind`]), zero-filled
    /// where a parameter did not influence the root.
    pub fn collect_grads(&self, grads: &mut Grads<T>, bound: &[Var]) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(bound)
            .map(|(p, &v)| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(p.tensor.shape()))
            })
            .collect()
    }
}
