//! Focal loss over per-pixel softmax outputs.

use super::tensor::{FeatureTensor, Real};
use crate::{Error, Result};

/// Probabilities are clamped to this floor before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Loss value and its gradient with respect to the softmax logits.
#[derive(Debug, Clone)]
pub struct FocalLoss<T> {
    pub value: T,
    pub grad_logits: FeatureTensor<T>,
}

/// `-(1/b_s) sum_pixels alpha (1 - p_t)^gamma log p_t`, where `p_t` is the
/// probability of the pixel's target class. `targets` holds one class index
/// per pixel (the one-hot position).
pub fn focal_loss<T: Real>(
    probs: &FeatureTensor<T>,
    targets: &[usize],
    alpha: f64,
    gamma: f64,
    batch_size: usize,
) -> Result<FocalLoss<T>> {
    let c = probs.channels;
    if targets.len() != probs.batch * probs.pixels() {
        return Err(Error::contract(format!(
            "{} targets for {} pixels",
            targets.len(),
            probs.batch * probs.pixels()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::contract(format!("target class {bad} outside 0..{c}")));
    }
    if batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    let (a, g) = (T::of(alpha), T::of(gamma));
    let floor = T::of(PROB_FLOOR);
    let inv_bs = T::one() / T::of(batch_size as f64);
    let mut total = T::zero();
    let mut grad = FeatureTensor::zeros(probs.shape());
    for ((px, &t), out) in probs
        .data
        .chunks_exact(c)
        .zip(targets)
        .zip(grad.data.chunks_exact_mut(c))
    {
        let p = px[t].max(floor).min(T::one());
        let q = T::one() - p;
        let log_p = p.ln();
        let modulator = if gamma == 0.0 { T::one() } else { q.powf(g) };
        total -= a * modulator * log_p;

        // dL/dz_k = alpha [gamma q^(gamma-1) p log p - q^gamma] (delta_tk - p_k)
        let slope = if gamma == 0.0 || q == T::zero() {
            T::zero()
        } else {
            g * q.powf(g - T::one()) * p * log_p
        };
        let coeff = a * (slope - modulator) * inv_bs;
        for (k, o) in out.iter_mut().enumerate() {
            let delta = if k == t { T::one() } else { T::zero() };
            *o = coeff * (delta - px[k]);
        }
    }
    Ok(FocalLoss {
        value: total * inv_bs,
        grad_logits: grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64) -> FeatureTensor<f64> {
        FeatureTensor::from_vec((1, 1, 1, 2), vec![p, 1.0 - p])
    }

    #[test]
    fn certain_prediction_costs_nothing() {
        let l = focal_loss(&single(1.0), &[0], 0.25, 2.0, 1).unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn reduces_to_cross_entropy() {
        let l = focal_loss(&single(0.5), &[0], 1.0, 0.0, 1).unwrap();
        assert!((l.value - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn focal_point_value() {
        let l = focal_loss(&single(0.5), &[0], 0.25, 2.0, 1).unwrap();
        assert!((l.value - 0.043322).abs() < 1e-6);
    }

    #[test]
    fn zero_probability_is_finite() {
        let l = focal_loss(&single(0.0), &[0], 0.25, 2.0, 1).unwrap();
        assert!(l.value.is_finite() && l.value > 0.0);
        assert!(l.grad_logits.is_finite());
    }

    #[test]
    fn rejects_bad_targets() {
        assert!(focal_loss(&single(0.5), &[2], 0.25, 2.0, 1).is_err());
        assert!(focal_loss(&single(0.5), &[0, 1], 0.25, 2.0, 1).is_err());
    }
}
