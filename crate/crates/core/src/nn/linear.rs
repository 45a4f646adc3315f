use ndarray::{Array1, Array2, Array3, Ix2};
use rand::Rng;

use super::Mode;
use crate::param::{join_name, HasParams, Param, Real};

/// Dense layer applied to the last axis of a `(B, N, D)` token stack.
pub struct Linear<F> {
    pub weight: Param<F>, // (d_in, d_out)
    pub bias: Param<F>,   // (d_out)
    d_in: usize,
    d_out: usize,
    cache: Option<Array2<F>>, // flattened input (B*N, d_in)
}

impl<F: Real> Linear<F> {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: Param::he_normal(&[d_in, d_out], d_in, rng),
            bias: Param::zeros(&[d_out]),
            d_in,
            d_out,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array3<F>, mode: Mode) -> Array3<F> {
        let (b, n, d) = x.dim();
        assert_eq!(d, self.d_in, "linear input dim mismatch");
        let flat = x.to_shape((b * n, d)).unwrap();
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut y = flat.dot(&w);
        for mut row in y.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v + self.bias.value[[j]];
            }
        }
        self.cache = mode.is_train().then(|| flat.to_owned());
        y.into_shape_with_order((b, n, self.d_out)).unwrap()
    }

    pub fn backward(&mut self, grad_out: &Array3<F>) -> Array3<F> {
        let x = self.cache.as_ref().expect("linear backward without forward");
        let (b, n, d_out) = grad_out.dim();
        let g = grad_out.to_shape((b * n, d_out)).unwrap();
        let dw = x.t().dot(&g);
        let mut db = Array1::<F>::zeros(d_out);
        for row in g.rows() {
            for (j, &v) in row.iter().enumerate() {
                db[j] = db[j] + v;
            }
        }
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let dx = g.dot(&w.t());
        self.weight.accumulate(&dw.into_dyn());
        self.bias.accumulate(&db.into_dyn());
        dx.into_shape_with_order((b, n, self.d_in)).unwrap()
    }
}

impl<F: Real> HasParams<F> for Linear<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join_name(prefix, "weight"), &self.weight);
        f(&join_name(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join_name(prefix, "weight"), &mut self.weight);
        f(&join_name(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lin = Linear::<f64>::new(3, 2, &mut rng);
        let x = Array3::from_shape_simple_fn((1, 4, 3), || f64::std_normal(&mut rng));
        let readout = Array3::from_shape_simple_fn((1, 4, 2), || f64::std_normal(&mut rng));

        let _ = lin.forward(&x, Mode::Train);
        let dx = lin.backward(&readout);

        let eps = 1e-6;
        for idx in [[0usize, 0, 0], [0, 2, 1], [0, 3, 2]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let lp = (&lin.forward(&xp, Mode::Eval) * &readout).sum();
            let lm = (&lin.forward(&xm, Mode::Eval) * &readout).sum();
            let num = (lp - lm) / (2.0 * eps);
            assert!((dx[idx] - num).abs() < 1e-7);
        }
    }
}
