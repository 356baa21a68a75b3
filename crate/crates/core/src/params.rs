//! Named parameter storage shared by networks, optimizers and checkpoints.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or dense weight; subject to weight decay.
    Weight,
    Bias,
    /// Normalization scale or shift.
    Norm,
    /// Running statistic, never trained.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub kind: ParamKind,
}

impl<T: Real> Param<T> {
    pub fn trainable(&self) -> bool {
        self.kind != ParamKind::Buffer
    }

    pub fn decays(&self) -> bool {
        self.kind == ParamKind::Weight
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> usize {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name: name.into(), value, grad, kind });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable()).map(|p| p.value.len()).sum()
    }

    /// Replaces values by name; every stored parameter must be present with
    /// the same shape.
    pub fn load_values(&mut self, entries: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, t) in entries {
            let i = self.find(&name).ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
            if self.params[i].value.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: stored shape {:?}, expected {:?}",
                    t.shape(),
                    self.params[i].value.shape()
                )));
            }
            self.params[i].value = t;
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!("checkpoint lacks parameter {}", self.params[i].name)));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), grad: p.grad.cast(), kind: p.kind })
                .collect(),
        }
    }
}
