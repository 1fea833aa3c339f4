//! A recorded scalar loss together with the route back to the parameters.

use crate::error::Result;
use crate::model::{Binding, ModelParams};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone)]
pub struct Objective {
    tape: Tape,
    loss: Option<Var>,
    binding: Binding,
}

impl Objective {
    pub(crate) fn new(tape: Tape, loss: Var, binding: Binding) -> Self {
        Self {
            tape,
            loss: Some(loss),
            binding,
        }
    }

    /// A zero loss with no gradient (e.g. every pair masked out).
    pub(crate) fn empty() -> Self {
        Self {
            tape: Tape::new(),
            loss: None,
            binding: Binding::default(),
        }
    }

    pub fn value(&self) -> f64 {
        self.loss.map_or(0.0, |l| self.tape.scalar(l))
    }

    pub fn is_empty(&self) -> bool {
        self.loss.is_none()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn loss_var(&self) -> Option<Var> {
        self.loss
    }

    pub fn binding(&self) -> &Binding {
        &self.binding
    }

    /// Adds `scale · ∂loss/∂p` into the gradient buffers of the trainable
    /// parameters. Does nothing for an empty objective.
    pub fn backward_into(&self, params: &mut ModelParams, scale: f64) -> Result<()> {
        let Some(loss) = self.loss else {
            return Ok(());
        };
        let grads = self.tape.backward(loss)?;
        self.binding.accumulate(&grads, params, scale)
    }
}
