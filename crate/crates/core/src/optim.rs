//! Stochastic gradient descent with heavy-ball momentum.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SGD with momentum over one parameter group.
///
/// Update rule: `v ← momentum·v + grad`, `p ← p − lr·v`; gradients are
/// cleared afterwards. Velocity buffers are created on the first step and
/// bound to the order of the parameter list from then on.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::contract(format!("learning rate {lr} must be >= 0")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::contract(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Replaces the velocity buffers, e.g. when resuming from a checkpoint.
    pub fn set_velocity(&mut self, velocity: Vec<Vec<f64>>) {
        self.velocity = velocity;
    }

    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::MissingGrad(i));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| alloc::vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len()
            || self.velocity.iter().zip(params.iter()).any(|(v, p)| v.len() != p.len())
        {
            return Err(Error::shape(
                "Sgd::step",
                "parameter list does not match velocity buffers",
            ));
        }
        if self.lr == 0.0 {
            // Parameters stay bit-identical; velocity still integrates.
            for (v, p) in self.velocity.iter_mut().zip(params.iter_mut()) {
                let g = p.grad().unwrap();
                for (vi, gi) in v.iter_mut().zip(g) {
                    *vi = self.momentum * *vi + gi;
                }
                p.zero_grad();
            }
            return Ok(());
        }
        for (v, p) in self.velocity.iter_mut().zip(params.iter_mut()) {
            let g = p.grad().unwrap().to_vec();
            let data = p.data_mut();
            for ((vi, gi), x) in v.iter_mut().zip(&g).zip(data.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *x -= self.lr * *vi;
            }
            p.zero_grad();
        }
        Ok(())
    }
}
