use std::collections::BTreeMap;

use super::tensor::{ParamStore, Scalar};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerSpec {
    /// Momentum SGD with inverse-time decay `lr / (1 + decay·t)`.
    Sgd {
        learning_rate: f64,
        decay: f64,
        momentum: f64,
        nesterov: bool,
    },
    RmsProp {
        learning_rate: f64,
        rho: f64,
        epsilon: f64,
    },
}

impl OptimizerSpec {
    /// Scratch network: lr 0.001, decay 1e-6, momentum 0.9, Nesterov.
    pub const SCRATCH_SGD: OptimizerSpec = OptimizerSpec::Sgd {
        learning_rate: 0.001,
        decay: 1e-6,
        momentum: 0.9,
        nesterov: true,
    };

    /// Fine-tuning: lr 1e-4, momentum 0.9; decay and Nesterov left at their
    /// defaults (0 / off).
    pub const FINETUNE_SGD: OptimizerSpec = OptimizerSpec::Sgd {
        learning_rate: 1e-4,
        decay: 0.0,
        momentum: 0.9,
        nesterov: false,
    };

    pub const RMSPROP_DEFAULT: OptimizerSpec = OptimizerSpec::RmsProp {
        learning_rate: 0.001,
        rho: 0.9,
        epsilon: 1e-7,
    };

    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerSpec::Sgd { learning_rate, .. } | OptimizerSpec::RmsProp { learning_rate, .. } => {
                learning_rate
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.learning_rate();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be > 0")));
        }
        match *self {
            OptimizerSpec::Sgd { momentum, decay, .. } => {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(Error::InvalidArgument(format!("momentum {momentum} outside [0, 1)")));
                }
                if !(decay >= 0.0) {
                    return Err(Error::InvalidArgument(format!("decay {decay} must be >= 0")));
                }
            }
            OptimizerSpec::RmsProp { rho, epsilon, .. } => {
                if !(rho > 0.0 && rho < 1.0) {
                    return Err(Error::InvalidArgument(format!("rho {rho} outside (0, 1)")));
                }
                if !(epsilon >= 0.0) {
                    return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be >= 0")));
                }
            }
        }
        Ok(())
    }
}

/// One SGD update of `theta` in place, `t` being the number of updates
/// already applied:
///
/// `lr_t = lr / (1 + decay·t)`, `v ← μ·v − lr_t·g`, then
/// `θ ← θ + μ·v − lr_t·g` (Nesterov) or `θ ← θ + v`.
#[allow(clippy::too_many_arguments)]
pub fn sgd_step<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    learning_rate: f64,
    decay: f64,
    momentum: f64,
    nesterov: bool,
    t: u64,
) -> Result<()> {
    if theta.len() != grad.len() || theta.len() != velocity.len() {
        return Err(Error::Shape(format!(
            "sgd_step: {} params, {} grads, {} velocities",
            theta.len(),
            grad.len(),
            velocity.len()
        )));
    }
    let lr_t = learning_rate / (1.0 + decay * t as f64);
    for ((p, &g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let g = g.as_f64();
        let vel = momentum * v.as_f64() - lr_t * g;
        *v = T::of(vel);
        let step = if nesterov { momentum * vel - lr_t * g } else { vel };
        *p = T::of(p.as_f64() + step);
    }
    Ok(())
}

/// One RMSprop update: `a ← ρ·a + (1−ρ)·g²`, `θ ← θ − lr·g / (√a + ε)`.
pub fn rmsprop_step<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    accumulator: &mut [T],
    learning_rate: f64,
    rho: f64,
    epsilon: f64,
) -> Result<()> {
    if theta.len() != grad.len() || theta.len() != accumulator.len() {
        return Err(Error::Shape(format!(
            "rmsprop_step: {} params, {} grads, {} accumulators",
            theta.len(),
            grad.len(),
            accumulator.len()
        )));
    }
    for ((p, &g), a) in theta.iter_mut().zip(grad).zip(accumulator.iter_mut()) {
        let g = g.as_f64();
        let acc = rho * a.as_f64() + (1.0 - rho) * g * g;
        *a = T::of(acc);
        *p = T::of(p.as_f64() - learning_rate * g / (acc.sqrt() + epsilon));
    }
    Ok(())
}

/// Optimizer with per-parameter slot state and a running update count.
///
/// The learning rate held here is the base rate; plateau reduction rewrites
/// it while the SGD decay clock keeps running.
#[derive(Debug, Clone)]
pub struct Optimizer<T = f32> {
    spec: OptimizerSpec,
    learning_rate: f64,
    iterations: u64,
    slots: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(spec: OptimizerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Optimizer {
            spec,
            learning_rate: spec.learning_rate(),
            iterations: 0,
            slots: BTreeMap::new(),
        })
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    /// Updates every parameter that has an entry in `grads`; parameters
    /// without a gradient (frozen blocks) are not touched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Missing(format!("parameter `{name}` for gradient")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let slot = self
                .slots
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            match self.spec {
                OptimizerSpec::Sgd {
                    decay,
                    momentum,
                    nesterov,
                    ..
                } => sgd_step(
                    p.data_mut(),
                    g.data(),
                    slot,
                    self.learning_rate,
                    decay,
                    momentum,
                    nesterov,
                    self.iterations,
                )?,
                OptimizerSpec::RmsProp { rho, epsilon, .. } => {
                    rmsprop_step(p.data_mut(), g.data(), slot, self.learning_rate, rho, epsilon)?
                }
            }
        }
        self.iterations += 1;
        Ok(())
    }
}
