//! Training objectives: smoothed dice loss, binary cross entropy on the
//! single sigmoid channel, and their 50/50 combination. Each loss comes with
//! its analytic gradient with respect to the predicted probabilities.

use ndarray::{Array2, Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::param::Real;

/// Clamp applied to probabilities before the logarithms in the cross
/// entropy.
pub const BCE_CLAMP: f64 = 1e-7;

/// Which objective a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Dice,
    /// `0.5 * dice + 0.5 * bce`
    Combined,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Dice => "dice",
            LossKind::Combined => "combined",
        }
    }
}

fn check_dims<F: Real>(pred: &Array2<F>, gt: &Array2<u8>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.dim(),
            gt.dim()
        )));
    }
    Ok(())
}

/// Smoothed dice loss `1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)`.
pub fn dice_loss<F: Real>(pred: &Array2<F>, gt: &Array2<u8>, eps: f64) -> Result<F> {
    check_dims(pred, gt)?;
    if eps <= 0.0 {
        return Err(Error::config("dice smoothing eps must be > 0"));
    }
    let eps = F::from_f64c(eps);
    let mut inter = F::zero();
    let mut sum_p = F::zero();
    let mut sum_g = F::zero();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        sum_p = sum_p + p;
        if g != 0 {
            inter = inter + p;
            sum_g = sum_g + F::one();
        }
    }
    let two = F::one() + F::one();
    Ok(F::one() - (two * inter + eps) / (sum_p + sum_g + eps))
}

/// Dice loss plus its gradient with respect to `pred`.
pub fn dice_loss_grad<F: Real>(
    pred: &Array2<F>,
    gt: &Array2<u8>,
    eps: f64,
) -> Result<(F, Array2<F>)> {
    let loss = dice_loss(pred, gt, eps)?;
    let eps = F::from_f64c(eps);
    let two = F::one() + F::one();
    let mut inter = F::zero();
    let mut sum_p = F::zero();
    let mut sum_g = F::zero();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        sum_p = sum_p + p;
        if g != 0 {
            inter = inter + p;
            sum_g = sum_g + F::one();
        }
    }
    let num = two * inter + eps;
    let den = sum_p + sum_g + eps;
    let den2 = den * den;
    let grad = ndarray::Zip::from(pred).and(gt).map_collect(|_, &g| {
        let dnum = if g != 0 { two } else { F::zero() };
        -(dnum * den - num) / den2
    });
    Ok((loss, grad))
}

/// Mean binary cross entropy; probabilities are clamped to
/// `[BCE_CLAMP, 1 - BCE_CLAMP]` before the logs.
pub fn bce_loss<F: Real>(pred: &Array2<F>, gt: &Array2<u8>) -> Result<F> {
    check_dims(pred, gt)?;
    let lo = F::from_f64c(BCE_CLAMP);
    let hi = F::one() - lo;
    let mut total = F::zero();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let p = p.max(lo).min(hi);
        total = total
            + if g != 0 {
                -(p.ln())
            } else {
                -((F::one() - p).ln())
            };
    }
    Ok(total / F::from_f64c(pred.len() as f64))
}

pub fn bce_loss_grad<F: Real>(pred: &Array2<F>, gt: &Array2<u8>) -> Result<(F, Array2<F>)> {
    let loss = bce_loss(pred, gt)?;
    let lo = F::from_f64c(BCE_CLAMP);
    let hi = F::one() - lo;
    let n = F::from_f64c(pred.len() as f64);
    let grad = ndarray::Zip::from(pred).and(gt).map_collect(|&p, &g| {
        if p < lo || p > hi {
            F::zero() // clamped region is flat
        } else if g != 0 {
            -F::one() / (p * n)
        } else {
            F::one() / ((F::one() - p) * n)
        }
    });
    Ok((loss, grad))
}

/// `0.5 * dice + 0.5 * bce` with the default dice smoothing of 1.
pub fn combined_loss<F: Real>(pred: &Array2<F>, gt: &Array2<u8>, eps: f64) -> Result<F> {
    let half = F::from_f64c(0.5);
    Ok(half * dice_loss(pred, gt, eps)? + half * bce_loss(pred, gt)?)
}

pub fn combined_loss_grad<F: Real>(
    pred: &Array2<F>,
    gt: &Array2<u8>,
    eps: f64,
) -> Result<(F, Array2<F>)> {
    let half = F::from_f64c(0.5);
    let (ld, gd) = dice_loss_grad(pred, gt, eps)?;
    let (lb, gb) = bce_loss_grad(pred, gt)?;
    let grad = ndarray::Zip::from(&gd)
        .and(&gb)
        .map_collect(|&a, &b| half * a + half * b);
    Ok((half * ld + half * lb, grad))
}

/// Mean loss and gradient over a batch: per-sample loss averaged over the
/// batch, gradients scaled accordingly. `pred` is `(B, 1, H, W)`, `gt` is
/// `(B, H, W)`.
pub fn batch_loss_grad<F: Real>(
    kind: LossKind,
    pred: &Array4<F>,
    gt: &Array3<u8>,
    eps: f64,
) -> Result<(F, Array4<F>)> {
    let (b, c, h, w) = pred.dim();
    if c != 1 || gt.dim() != (b, h, w) {
        return Err(Error::shape(format!(
            "batch loss expects (B,1,H,W) vs (B,H,W), got {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    let mut total = F::zero();
    let mut grad = Array4::<F>::zeros(pred.dim());
    let scale = F::from_f64c(1.0 / b as f64);
    for bi in 0..b {
        let p = pred
            .index_axis(Axis(0), bi)
            .index_axis(Axis(0), 0)
            .to_owned();
        let g = gt.index_axis(Axis(0), bi).to_owned();
        let (loss, gpix) = match kind {
            LossKind::Dice => dice_loss_grad(&p, &g, eps)?,
            LossKind::Combined => combined_loss_grad(&p, &g, eps)?,
        };
        total = total + loss;
        grad.slice_mut(ndarray::s![bi, 0, .., ..])
            .assign(&gpix.mapv(|v| v * scale));
    }
    Ok((total * scale, grad))
}

/// Mean loss over a batch without gradients (validation passes).
pub fn batch_loss<F: Real>(
    kind: LossKind,
    pred: &Array4<F>,
    gt: &Array3<u8>,
    eps: f64,
) -> Result<F> {
    let (b, c, h, w) = pred.dim();
    if c != 1 || gt.dim() != (b, h, w) {
        return Err(Error::shape("batch loss shape mismatch".to_string()));
    }
    let mut total = F::zero();
    for bi in 0..b {
        let p = pred
            .index_axis(Axis(0), bi)
            .index_axis(Axis(0), 0)
            .to_owned();
        let g = gt.index_axis(Axis(0), bi).to_owned();
        total = total
            + match kind {
                LossKind::Dice => dice_loss(&p, &g, eps)?,
                LossKind::Combined => combined_loss(&p, &g, eps)?,
            };
    }
    Ok(total / F::from_f64c(b as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dice_perfect_overlap_is_zero() {
        let pred = Array2::<f64>::ones((4, 4));
        let gt = Array2::<u8>::ones((4, 4));
        let l = dice_loss(&pred, &gt, 1.0).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn dice_disjoint_sixteen_pixels() {
        let pred = Array2::<f64>::zeros((4, 4));
        let gt = Array2::<u8>::ones((4, 4));
        let l = dice_loss(&pred, &gt, 1.0).unwrap();
        assert!((l - (1.0 - 1.0 / 17.0)).abs() < 1e-12);
    }

    #[test]
    fn dice_partial_overlap_four_ninths() {
        // 4 predicted positives, 4 true positives, overlap 2
        let mut pred = Array2::<f64>::zeros((4, 4));
        let mut gt = Array2::<u8>::zeros((4, 4));
        for i in 0..4 {
            pred[[0, i]] = 1.0;
        }
        gt[[0, 2]] = 1;
        gt[[0, 3]] = 1;
        gt[[1, 0]] = 1;
        gt[[1, 1]] = 1;
        let l = dice_loss(&pred, &gt, 1.0).unwrap();
        assert!((l - 4.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn dice_rejects_bad_inputs() {
        let pred = Array2::<f64>::zeros((4, 4));
        let gt = Array2::<u8>::zeros((4, 5));
        assert!(matches!(dice_loss(&pred, &gt, 1.0), Err(Error::Shape(_))));
        let gt = Array2::<u8>::zeros((4, 4));
        assert!(matches!(dice_loss(&pred, &gt, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn bce_at_half_is_ln_two() {
        let pred = Array2::<f64>::from_elem((3, 3), 0.5);
        let mut gt = Array2::<u8>::zeros((3, 3));
        gt[[1, 1]] = 1;
        let l = bce_loss(&pred, &gt).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_prediction_is_near_zero() {
        let mut pred = Array2::<f64>::zeros((2, 2));
        let mut gt = Array2::<u8>::zeros((2, 2));
        pred[[0, 0]] = 1.0;
        gt[[0, 0]] = 1;
        let l = bce_loss(&pred, &gt).unwrap();
        assert!((l - (-(1.0 - BCE_CLAMP_F).ln())).abs() < 1e-12);
        assert!(l < 1.1e-7);
    }

    const BCE_CLAMP_F: f64 = BCE_CLAMP;

    #[test]
    fn bce_single_positive_point_nine() {
        let pred = Array2::<f64>::from_elem((1, 1), 0.9);
        let gt = Array2::<u8>::ones((1, 1));
        let l = bce_loss(&pred, &gt).unwrap();
        assert!((l - 0.10536051565782628).abs() < 1e-12);
    }

    #[test]
    fn combined_is_exact_affine_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pred = Array2::<f64>::from_shape_simple_fn((8, 8), || rng.random::<f64>());
        let gt = Array2::<u8>::from_shape_simple_fn((8, 8), || u8::from(rng.random::<f64>() > 0.5));
        let c = combined_loss(&pred, &gt, 1.0).unwrap();
        let d = dice_loss(&pred, &gt, 1.0).unwrap();
        let b = bce_loss(&pred, &gt).unwrap();
        assert!((c - 0.5 * d - 0.5 * b).abs() < 1e-12);
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pred = Array2::<f64>::from_shape_simple_fn((4, 4), || 0.2 + 0.6 * rng.random::<f64>());
        let gt = Array2::<u8>::from_shape_simple_fn((4, 4), || u8::from(rng.random::<f64>() > 0.5));
        let (_, grad) = dice_loss_grad(&pred, &gt, 1.0).unwrap();
        let h = 1e-7;
        for idx in [[0usize, 0], [1, 2], [3, 3]] {
            let mut p = pred.clone();
            p[idx] += h;
            let lp = dice_loss(&p, &gt, 1.0).unwrap();
            p[idx] -= 2.0 * h;
            let lm = dice_loss(&p, &gt, 1.0).unwrap();
            let num = (lp - lm) / (2.0 * h);
            let rel = (grad[idx] - num).abs() / num.abs().max(1e-12);
            assert!(rel < 1e-6, "rel {rel}");
        }
    }

    #[test]
    fn combined_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pred = Array2::<f64>::from_shape_simple_fn((4, 4), || 0.2 + 0.6 * rng.random::<f64>());
        let gt = Array2::<u8>::from_shape_simple_fn((4, 4), || u8::from(rng.random::<f64>() > 0.5));
        let (_, grad) = combined_loss_grad(&pred, &gt, 1.0).unwrap();
        let h = 1e-7;
        for idx in [[0usize, 1], [2, 2]] {
            let mut p = pred.clone();
            p[idx] += h;
            let lp = combined_loss(&p, &gt, 1.0).unwrap();
            p[idx] -= 2.0 * h;
            let lm = combined_loss(&p, &gt, 1.0).unwrap();
            let num = (lp - lm) / (2.0 * h);
            assert!((grad[idx] - num).abs() / num.abs().max(1e-12) < 1e-6);
        }
    }

    #[test]
    fn dice_swap_symmetry_for_binary_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = Array2::<u8>::from_shape_simple_fn((6, 6), || u8::from(rng.random::<f64>() > 0.6));
            let b = Array2::<u8>::from_shape_simple_fn((6, 6), || u8::from(rng.random::<f64>() > 0.6));
            let af = a.mapv(|v| v as f64);
            let bf = b.mapv(|v| v as f64);
            let l1 = dice_loss(&af, &b, 1.0).unwrap();
            let l2 = dice_loss(&bf, &a, 1.0).unwrap();
            assert!((l1 - l2).abs() < 1e-15);
        }
    }
}
