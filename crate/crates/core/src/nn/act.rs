use ndarray::{Array, Dimension, Zip};

use crate::param::Real;

pub fn relu_forward<F: Real, D: Dimension>(x: &Array<F, D>) -> Array<F, D> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// Backward through ReLU given the forward *output* `y`.
pub fn relu_backward<F: Real, D: Dimension>(y: &Array<F, D>, grad: &Array<F, D>) -> Array<F, D> {
    let mut dx = grad.clone();
    Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        if yv <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

pub fn sigmoid_forward<F: Real, D: Dimension>(x: &Array<F, D>) -> Array<F, D> {
    // Saturated values are nudged to the nearest representable point inside
    // (0, 1) so probability-map outputs keep the open-interval contract.
    let lo = F::min_positive_value();
    let hi = F::one() - F::epsilon() / (F::one() + F::one());
    x.mapv(|v| (F::one() / (F::one() + (-v).exp())).max(lo).min(hi))
}

/// Backward through the logistic function given the forward *output* `y`.
pub fn sigmoid_backward<F: Real, D: Dimension>(y: &Array<F, D>, grad: &Array<F, D>) -> Array<F, D> {
    let mut dx = grad.clone();
    Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        *d = *d * yv * (F::one() - yv);
    });
    dx
}
