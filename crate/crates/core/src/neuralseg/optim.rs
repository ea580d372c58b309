//! ADADELTA: per-parameter step sizes from running averages of squared
//! gradients and squared updates, no global learning rate.

use super::tensor::Real;
use crate::{Error, Result};

pub const DEFAULT_RHO: f64 = 0.95;
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Accumulators for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdadeltaSlot<T> {
    /// Running average of squared gradients.
    pub grad_sq: Vec<T>,
    /// Running average of squared updates.
    pub update_sq: Vec<T>,
}

impl<T: Real> AdadeltaSlot<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            grad_sq: vec![T::zero(); len],
            update_sq: vec![T::zero(); len],
        }
    }
}

/// Optimizer state for a whole parameter set, one slot per tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdadeltaState<T> {
    pub slots: Vec<AdadeltaSlot<T>>,
}

impl<T: Real> AdadeltaState<T> {
    pub fn for_shapes<'a>(tensors: impl IntoIterator<Item = &'a Vec<T>>) -> Self {
        Self {
            slots: tensors.into_iter().map(|t| AdadeltaSlot::zeros(t.len())).collect(),
        }
    }
}

/// One in-place update of a single tensor.
pub fn adadelta_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    slot: &mut AdadeltaSlot<T>,
    rho: f64,
    epsilon: f64,
) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != slot.grad_sq.len()
        || params.len() != slot.update_sq.len()
    {
        return Err(Error::contract("adadelta: parameter, gradient and state sizes differ"));
    }
    let (rho, eps) = (T::of(rho), T::of(epsilon));
    let keep = T::one() - rho;
    for (((x, &g), eg), ed) in params
        .iter_mut()
        .zip(grads)
        .zip(slot.grad_sq.iter_mut())
        .zip(slot.update_sq.iter_mut())
    {
        *eg = rho * *eg + keep * g * g;
        let delta = -((*ed + eps).sqrt() / (*eg + eps).sqrt()) * g;
        *ed = rho * *ed + keep * delta * delta;
        *x += delta;
    }
    Ok(())
}

/// Applies [`adadelta_step`] tensor by tensor.
pub fn adadelta_update<T: Real>(
    params: Vec<&mut Vec<T>>,
    grads: &[Vec<T>],
    state: &mut AdadeltaState<T>,
    rho: f64,
    epsilon: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.slots.len() {
        return Err(Error::contract("adadelta: tensor counts differ"));
    }
    for ((p, g), s) in params.into_iter().zip(grads).zip(state.slots.iter_mut()) {
        adadelta_step(p, g, s, rho, epsilon)?;
    }
    Ok(())
}
