use rand::RngCore;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::zoo::{MechanismGrad, Network};

/// Which forward pass an attack differentiates.
pub enum View<'a> {
    /// The evaluation prediction (logit mean over the evaluation fixations).
    Ensemble,
    /// Same forward values as `Ensemble`, with the sampling mechanisms
    /// treated as the identity on the backward pass.
    Surrogate,
    /// One randomly drawn training-range fixation.
    RandomFixation(&'a mut dyn RngCore),
}

/// A classifier an attack can query and differentiate.
pub trait AttackModel<T: Real> {
    fn classes(&self) -> usize;

    /// `[B, K]` logits of the `[B, C, H, W]` input `x`.
    fn logits_on_tape(&self, tape: &mut Tape<T>, x: Var, view: View<'_>) -> Result<Var>;

    /// Evaluation logits, off-tape.
    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = self.logits_on_tape(&mut tape, v, View::Ensemble)?;
        Ok(tape.value(y).clone())
    }
}

impl<T: Real> AttackModel<T> for Network<T> {
    fn classes(&self) -> usize {
        self.spec().classes
    }

    fn logits_on_tape(&self, tape: &mut Tape<T>, x: Var, view: View<'_>) -> Result<Var> {
        let p = self.bind(tape, false);
        match view {
            View::Ensemble => self.predict_with(tape, &p, x, MechanismGrad::Exact),
            View::Surrogate => self.predict_with(tape, &p, x, MechanismGrad::Identity),
            View::RandomFixation(rng) => {
                let fix = self.sample_fixation(rng);
                Ok(self.forward_single_fixation(tape, &p, x, fix)?.logits)
            }
        }
    }
}

/// Affine classifier `logits = W·vec(x) + b`, with `W` of shape `[K, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> LinearModel<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let (k, _) = weight.dims2()?;
        if bias.shape() != [k] {
            return Err(Error::shape(format!("bias {:?} for {k} classes", bias.shape())));
        }
        Ok(Self { weight, bias })
    }
}

impl<T: Real> AttackModel<T> for LinearModel<T> {
    fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    fn logits_on_tape(&self, tape: &mut Tape<T>, x: Var, _view: View<'_>) -> Result<Var> {
        let b = tape.shape(x)[0];
        let d = self.weight.shape()[1];
        if tape.value(x).len() != b * d {
            return Err(Error::shape(format!("linear model expects {d} features per item")));
        }
        let flat = tape.reshape(x, &[b, d])?;
        let w = tape.constant(self.weight.clone());
        let bias = tape.constant(self.bias.clone());
        tape.dense(flat, w, bias)
    }
}
