//! Named, tagged parameter tensors.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::num::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer-facing role of a parameter. Only plain weights receive
/// decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Embedding,
    Norm,
    S4,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    value: Arc<Tensor<T>>,
}

impl<T> Param<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            kind,
            value: Arc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        self.params[id.0].value.clone()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        self.params[id.0].value = Arc::new(value);
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Same names, kinds and ids with values converted to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: Arc::new(p.value.cast()),
                })
                .collect(),
        }
    }
}
