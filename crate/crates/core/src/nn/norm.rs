use ndarray::{Array1, Array2, Array3, Array4, Axis, Ix1};

use super::Mode;
use crate::param::{join_name, HasParams, Param, Real};

/// Batch normalization over the channel axis of `(N, C, H, W)` maps.
///
/// Training mode normalizes with batch statistics and folds them into the
/// running estimates with `running = momentum * running + (1 - momentum) *
/// batch`; inference mode uses the running estimates.
pub struct BatchNorm2d<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Param<F>,
    pub running_var: Param<F>,
    channels: usize,
    momentum: f64,
    eps: f64,
    cache: Option<BnCache<F>>,
}

struct BnCache<F> {
    xhat: Array4<F>,
    invstd: Array1<F>,
}

impl<F: Real> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::ones(&[channels]),
            beta: Param::zeros(&[channels]),
            running_mean: Param::running_stat(ndarray::ArrayD::zeros(vec![channels])),
            running_var: Param::running_stat(ndarray::ArrayD::ones(vec![channels])),
            channels,
            momentum: 0.9,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Array4<F> {
        let (batch, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "batch norm channel mismatch");
        let m = (batch * h * w) as f64;
        let mut out = Array4::<F>::zeros(x.dim());

        match mode {
            Mode::Train => {
                let mut xhat = Array4::<F>::zeros(x.dim());
                let mut invstd = Array1::<F>::zeros(c);
                for ch in 0..c {
                    let plane = x.index_axis(Axis(1), ch);
                    let mean = plane.iter().copied().sum::<F>() / F::from_f64c(m);
                    let var = plane
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .sum::<F>()
                        / F::from_f64c(m);
                    let istd = F::one() / (var + F::from_f64c(self.eps)).sqrt();
                    invstd[ch] = istd;

                    let gamma = self.gamma.value[[ch]];
                    let beta = self.beta.value[[ch]];
                    let mut xh = xhat.index_axis_mut(Axis(1), ch);
                    let mut o = out.index_axis_mut(Axis(1), ch);
                    ndarray::Zip::from(&mut xh)
                        .and(&mut o)
                        .and(&plane)
                        .for_each(|xh, o, &v| {
                            let n = (v - mean) * istd;
                            *xh = n;
                            *o = gamma * n + beta;
                        });

                    let mom = F::from_f64c(self.momentum);
                    let keep = F::one() - mom;
                    let rm = &mut self.running_mean.value;
                    rm[[ch]] = mom * rm[[ch]] + keep * mean;
                    let rv = &mut self.running_var.value;
                    rv[[ch]] = mom * rv[[ch]] + keep * var;
                }
                self.cache = Some(BnCache { xhat, invstd });
            }
            Mode::Eval => {
                for ch in 0..c {
                    let mean = self.running_mean.value[[ch]];
                    let var = self.running_var.value[[ch]];
                    let istd = F::one() / (var + F::from_f64c(self.eps)).sqrt();
                    let gamma = self.gamma.value[[ch]];
                    let beta = self.beta.value[[ch]];
                    let plane = x.index_axis(Axis(1), ch);
                    let mut o = out.index_axis_mut(Axis(1), ch);
                    ndarray::Zip::from(&mut o).and(&plane).for_each(|o, &v| {
                        *o = gamma * (v - mean) * istd + beta;
                    });
                }
                self.cache = None;
            }
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let cache = self
            .cache
            .as_ref()
            .expect("batch norm backward requires a training-mode forward");
        let (batch, c, h, w) = grad_out.dim();
        let m = F::from_f64c((batch * h * w) as f64);
        let mut dx = Array4::<F>::zeros(grad_out.dim());
        let mut dgamma = Array1::<F>::zeros(c);
        let mut dbeta = Array1::<F>::zeros(c);
        for ch in 0..c {
            let dy = grad_out.index_axis(Axis(1), ch);
            let xh = cache.xhat.index_axis(Axis(1), ch);
            let sum_dy = dy.iter().copied().sum::<F>();
            let sum_dy_xhat = dy.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>();
            dgamma[ch] = sum_dy_xhat;
            dbeta[ch] = sum_dy;
            let scale = self.gamma.value[[ch]] * cache.invstd[ch] / m;
            let mut dxc = dx.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut dxc)
                .and(&dy)
                .and(&xh)
                .for_each(|d, &g, &x| {
                    *d = scale * (m * g - sum_dy - x * sum_dy_xhat);
                });
        }
        self.gamma.accumulate(&dgamma.into_dyn());
        self.beta.accumulate(&dbeta.into_dyn());
        dx
    }
}

impl<F: Real> HasParams<F> for BatchNorm2d<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join_name(prefix, "gamma"), &self.gamma);
        f(&join_name(prefix, "beta"), &self.beta);
        f(&join_name(prefix, "running_mean"), &self.running_mean);
        f(&join_name(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join_name(prefix, "gamma"), &mut self.gamma);
        f(&join_name(prefix, "beta"), &mut self.beta);
        f(&join_name(prefix, "running_mean"), &mut self.running_mean);
        f(&join_name(prefix, "running_var"), &mut self.running_var);
    }
}

/// Layer normalization over the embedding axis of `(B, N, D)` token stacks.
pub struct LayerNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    dim: usize,
    eps: f64,
    cache: Option<(Array3<F>, Array2<F>)>, // xhat, invstd per (b, n)
}

impl<F: Real> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::ones(&[dim]),
            beta: Param::zeros(&[dim]),
            dim,
            eps: 1e-6,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array3<F>, mode: Mode) -> Array3<F> {
        let (b, n, d) = x.dim();
        assert_eq!(d, self.dim, "layer norm dim mismatch");
        let df = F::from_f64c(d as f64);
        let mut out = Array3::<F>::zeros(x.dim());
        let mut xhat = Array3::<F>::zeros(x.dim());
        let mut invstd = Array2::<F>::zeros((b, n));
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        for bi in 0..b {
            for ni in 0..n {
                let row = x.slice(ndarray::s![bi, ni, ..]);
                let mean = row.iter().copied().sum::<F>() / df;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
                let istd = F::one() / (var + F::from_f64c(self.eps)).sqrt();
                invstd[[bi, ni]] = istd;
                for di in 0..d {
                    let h = (row[di] - mean) * istd;
                    xhat[[bi, ni, di]] = h;
                    out[[bi, ni, di]] = gamma[di] * h + beta[di];
                }
            }
        }
        self.cache = mode.is_train().then_some((xhat, invstd));
        out
    }

    pub fn backward(&mut self, grad_out: &Array3<F>) -> Array3<F> {
        let (xhat, invstd) = self
            .cache
            .as_ref()
            .expect("layer norm backward without forward");
        let (b, n, d) = grad_out.dim();
        let df = F::from_f64c(d as f64);
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut dx = Array3::<F>::zeros(grad_out.dim());
        let mut dgamma = Array1::<F>::zeros(d);
        let mut dbeta = Array1::<F>::zeros(d);
        for bi in 0..b {
            for ni in 0..n {
                let dy = grad_out.slice(ndarray::s![bi, ni, ..]);
                let xh = xhat.slice(ndarray::s![bi, ni, ..]);
                let mut sum_g = F::zero();
                let mut sum_gx = F::zero();
                for di in 0..d {
                    let g = dy[di] * gamma[di];
                    sum_g = sum_g + g;
                    sum_gx = sum_gx + g * xh[di];
                    dgamma[di] = dgamma[di] + dy[di] * xh[di];
                    dbeta[di] = dbeta[di] + dy[di];
                }
                let istd = invstd[[bi, ni]];
                for di in 0..d {
                    let g = dy[di] * gamma[di];
                    dx[[bi, ni, di]] = istd * (g - sum_g / df - xh[di] * sum_gx / df);
                }
            }
        }
        self.gamma.accumulate(&dgamma.into_dyn());
        self.beta.accumulate(&dbeta.into_dyn());
        dx
    }
}

impl<F: Real> HasParams<F> for LayerNorm<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join_name(prefix, "gamma"), &self.gamma);
        f(&join_name(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join_name(prefix, "gamma"), &mut self.gamma);
        f(&join_name(prefix, "beta"), &mut self.beta);
    }
}
