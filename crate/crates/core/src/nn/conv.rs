use ndarray::{Array2, Array4, ArrayView3, ArrayViewMut3, Axis, Ix4};
use rand::Rng;

use super::Mode;
use crate::error::{Error, Result};
use crate::param::{join_name, HasParams, Param, Real};

/// 2-D convolution, stride 1, square kernel, zero padding, optional dilation.
///
/// Kernels are stored `(out_channels, in_channels, k, k)`. The heavy lifting
/// goes through im2col plus a single matrix multiply per sample.
pub struct Conv2d<F> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    padding: usize,
    dilation: usize,
    cache: Option<Array4<F>>,
}

impl<F: Real> Conv2d<F> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        dilation: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = Param::he_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng);
        let bias = with_bias.then(|| Param::zeros(&[out_channels]));
        Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            padding,
            dilation,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn out_spatial(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = self.dilation * (self.kernel - 1);
        let oh = (h + 2 * self.padding).checked_sub(span).unwrap_or(0);
        let ow = (w + 2 * self.padding).checked_sub(span).unwrap_or(0);
        if oh == 0 || ow == 0 {
            return Err(Error::shape(format!(
                "conv output would be empty for input {h}x{w} (k={}, pad={}, dil={})",
                self.kernel, self.padding, self.dilation
            )));
        }
        Ok((oh, ow))
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        let (batch, cin, h, w) = x.dim();
        if cin != self.in_channels {
            return Err(Error::config(format!(
                "conv expects {} input channels, got {cin}",
                self.in_channels
            )));
        }
        let (oh, ow) = self.out_spatial(h, w)?;
        let k2 = self.in_channels * self.kernel * self.kernel;
        let w_flat = self.weight.value.view().into_dimensionality::<Ix4>().unwrap();
        let w_mat = w_flat.to_shape((self.out_channels, k2)).unwrap();

        let mut out = Array4::<F>::zeros((batch, self.out_channels, oh, ow));
        let mut col = Array2::<F>::zeros((k2, oh * ow));
        for n in 0..batch {
            im2col(
                &x.index_axis(Axis(0), n),
                self.kernel,
                self.padding,
                self.dilation,
                oh,
                ow,
                &mut col,
            );
            let y = w_mat.dot(&col); // (out, oh*ow)
            let mut out_n = out.index_axis_mut(Axis(0), n);
            for c in 0..self.out_channels {
                let bias = self
                    .bias
                    .as_ref()
                    .map(|b| b.value[[c]])
                    .unwrap_or_else(F::zero);
                let row = y.row(c);
                let mut plane = out_n.index_axis_mut(Axis(0), c);
                let flat = plane.as_slice_mut().unwrap();
                for (dst, src) in flat.iter_mut().zip(row.iter()) {
                    *dst = *src + bias;
                }
            }
        }
        self.cache = mode.is_train().then(|| x.clone());
        Ok(out)
    }

    /// Gradient with respect to the input; accumulates weight/bias gradients.
    pub fn backward(&mut self, grad_out: &Array4<F>) -> Array4<F> {
        let x = self.cache.as_ref().expect("conv backward without forward");
        let (batch, _, h, w) = x.dim();
        let (_, cout, oh, ow) = grad_out.dim();
        debug_assert_eq!(cout, self.out_channels);
        let k2 = self.in_channels * self.kernel * self.kernel;
        let w_flat = self.weight.value.view().into_dimensionality::<Ix4>().unwrap();
        let w_mat = w_flat.to_shape((self.out_channels, k2)).unwrap();

        let mut dw = Array2::<F>::zeros((self.out_channels, k2));
        let mut db = vec![F::zero(); self.out_channels];
        let mut dx = Array4::<F>::zeros(x.dim());
        let mut col = Array2::<F>::zeros((k2, oh * ow));
        for n in 0..batch {
            im2col(
                &x.index_axis(Axis(0), n),
                self.kernel,
                self.padding,
                self.dilation,
                oh,
                ow,
                &mut col,
            );
            let g_n = grad_out.index_axis(Axis(0), n);
            let g_mat = g_n.to_shape((self.out_channels, oh * ow)).unwrap();
            dw += &g_mat.dot(&col.t());
            for c in 0..self.out_channels {
                db[c] = db[c] + g_mat.row(c).iter().copied().sum::<F>();
            }
            let dcol = w_mat.t().dot(&g_mat.view()); // (k2, oh*ow)
            col2im(
                &dcol,
                self.kernel,
                self.padding,
                self.dilation,
                oh,
                ow,
                &mut dx.index_axis_mut(Axis(0), n),
            );
        }
        self.weight.accumulate(&dw.into_shape_with_order(vec![
            self.out_channels,
            self.in_channels,
            self.kernel,
            self.kernel,
        ])
        .unwrap());
        if let Some(b) = self.bias.as_mut() {
            b.accumulate(&ndarray::ArrayD::from_shape_vec(vec![self.out_channels], db).unwrap());
        }
        let _ = (h, w);
        dx
    }
}

impl<F: Real> HasParams<F> for Conv2d<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join_name(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join_name(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join_name(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join_name(prefix, "bias"), b);
        }
    }
}

fn im2col<F: Real>(
    x: &ArrayView3<'_, F>,
    k: usize,
    pad: usize,
    dil: usize,
    oh: usize,
    ow: usize,
    col: &mut Array2<F>,
) {
    let (cin, h, w) = x.dim();
    debug_assert_eq!(col.dim(), (cin * k * k, oh * ow));
    col.fill(F::zero());
    for c in 0..cin {
        let plane = x.index_axis(Axis(0), c);
        for ky in 0..k {
            for kx in 0..k {
                let row_idx = (c * k + ky) * k + kx;
                let mut row = col.row_mut(row_idx);
                let row = row.as_slice_mut().unwrap();
                for oy in 0..oh {
                    let iy = (oy + ky * dil) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = plane.index_axis(Axis(0), iy as usize);
                    let src = src.as_slice().unwrap();
                    let base = oy * ow;
                    for ox in 0..ow {
                        let ix = (ox + kx * dil) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            row[base + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<F: Real>(
    dcol: &Array2<F>,
    k: usize,
    pad: usize,
    dil: usize,
    oh: usize,
    ow: usize,
    dx: &mut ArrayViewMut3<'_, F>,
) {
    let (cin, h, w) = dx.dim();
    debug_assert_eq!(dcol.dim(), (cin * k * k, oh * ow));
    for c in 0..cin {
        let mut plane = dx.index_axis_mut(Axis(0), c);
        for ky in 0..k {
            for kx in 0..k {
                let row = dcol.row((c * k + ky) * k + kx);
                let row = row.as_slice().unwrap();
                for oy in 0..oh {
                    let iy = (oy + ky * dil) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let mut dst_row = plane.index_axis_mut(Axis(0), iy as usize);
                    let dst = dst_row.as_slice_mut().unwrap();
                    let base = oy * ow;
                    for ox in 0..ow {
                        let ix = (ox + kx * dil) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + row[base + ox];
                        }
                    }
                }
            }
        }
    }
}
