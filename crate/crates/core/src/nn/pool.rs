use ndarray::Array4;

use crate::error::{Error, Result};
use crate::param::Real;

/// 2x2 max pooling with stride 2. Ties resolve to the first element in
/// row-major order so backward routing is deterministic.
#[derive(Default)]
pub struct MaxPool2 {
    argmax: Option<(Array4<u8>, (usize, usize, usize, usize))>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<F: Real>(&mut self, x: &Array4<F>) -> Result<Array4<F>> {
        let (b, c, h, w) = x.dim();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "max pool requires even spatial dims, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array4::<F>::zeros((b, c, oh, ow));
        let mut arg = Array4::<u8>::zeros((b, c, oh, ow));
        for n in 0..b {
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = x[[n, ch, 2 * y, 2 * xx]];
                        let mut best_k = 0u8;
                        for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                            let v = x[[n, ch, 2 * y + dy, 2 * xx + dx]];
                            if v > best {
                                best = v;
                                best_k = k as u8;
                            }
                        }
                        out[[n, ch, y, xx]] = best;
                        arg[[n, ch, y, xx]] = best_k;
                    }
                }
            }
        }
        self.argmax = Some((arg, (b, c, h, w)));
        Ok(out)
    }

    pub fn backward<F: Real>(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let (arg, in_dim) = self.argmax.as_ref().expect("max pool backward without forward");
        let mut dx = Array4::<F>::zeros(*in_dim);
        let (b, c, oh, ow) = grad_out.dim();
        for n in 0..b {
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let k = arg[[n, ch, y, xx]] as usize;
                        let (dy, dxx) = (k / 2, k % 2);
                        dx[[n, ch, 2 * y + dy, 2 * xx + dxx]] = grad_out[[n, ch, y, xx]];
                    }
                }
            }
        }
        dx
    }
}

/// Nearest-neighbor 2x upsampling.
#[derive(Default)]
pub struct Upsample2;

impl Upsample2 {
    pub fn forward<F: Real>(x: &Array4<F>) -> Array4<F> {
        let (b, c, h, w) = x.dim();
        let mut out = Array4::<F>::zeros((b, c, 2 * h, 2 * w));
        for n in 0..b {
            for ch in 0..c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        out[[n, ch, y, xx]] = x[[n, ch, y / 2, xx / 2]];
                    }
                }
            }
        }
        out
    }

    pub fn backward<F: Real>(grad_out: &Array4<F>) -> Array4<F> {
        let (b, c, h2, w2) = grad_out.dim();
        let (h, w) = (h2 / 2, w2 / 2);
        let mut dx = Array4::<F>::zeros((b, c, h, w));
        for n in 0..b {
            for ch in 0..c {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        dx[[n, ch, y / 2, xx / 2]] =
                            dx[[n, ch, y / 2, xx / 2]] + grad_out[[n, ch, y, xx]];
                    }
                }
            }
        }
        dx
    }
}

/// 2x2 average pooling with stride 2 (used when an attention gate has to
/// bring a finer gating signal down to the skip resolution).
#[derive(Default)]
pub struct AvgPool2;

impl AvgPool2 {
    pub fn forward<F: Real>(x: &Array4<F>) -> Result<Array4<F>> {
        let (b, c, h, w) = x.dim();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "avg pool requires even spatial dims, got {h}x{w}"
            )));
        }
        let quarter = F::from_f64c(0.25);
        let mut out = Array4::<F>::zeros((b, c, h / 2, w / 2));
        for n in 0..b {
            for ch in 0..c {
                for y in 0..h / 2 {
                    for xx in 0..w / 2 {
                        let s = x[[n, ch, 2 * y, 2 * xx]]
                            + x[[n, ch, 2 * y, 2 * xx + 1]]
                            + x[[n, ch, 2 * y + 1, 2 * xx]]
                            + x[[n, ch, 2 * y + 1, 2 * xx + 1]];
                        out[[n, ch, y, xx]] = s * quarter;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn backward<F: Real>(grad_out: &Array4<F>) -> Array4<F> {
        let (b, c, oh, ow) = grad_out.dim();
        let quarter = F::from_f64c(0.25);
        let mut dx = Array4::<F>::zeros((b, c, 2 * oh, 2 * ow));
        for n in 0..b {
            for ch in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let g = grad_out[[n, ch, y, xx]] * quarter;
                        for (dy, dxx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            dx[[n, ch, 2 * y + dy, 2 * xx + dxx]] = g;
                        }
                    }
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn max_pool_picks_first_on_ties() {
        let x = array![[[[1.0f64, 1.0], [1.0, 1.0]]]];
        let mut pool = MaxPool2::new();
        let y = pool.forward(&x).unwrap();
        assert_eq!(y[[0, 0, 0, 0]], 1.0);
        let dx = pool.backward(&array![[[[2.0f64]]]]);
        assert_eq!(dx[[0, 0, 0, 0]], 2.0);
        assert_eq!(dx.sum(), 2.0);
    }

    #[test]
    fn max_pool_rejects_odd_dims() {
        let x = ndarray::Array4::<f64>::zeros((1, 1, 3, 4));
        assert!(MaxPool2::new().forward(&x).is_err());
    }

    #[test]
    fn upsample_round_trip_gradient_sums() {
        let x = array![[[[1.0f64, 2.0], [3.0, 4.0]]]];
        let y = Upsample2::forward(&x);
        assert_eq!(y.dim(), (1, 1, 4, 4));
        assert_eq!(y[[0, 0, 3, 3]], 4.0);
        let dx = Upsample2::backward(&ndarray::Array4::<f64>::ones((1, 1, 4, 4)));
        assert!(dx.iter().all(|&v| v == 4.0));
    }
}
