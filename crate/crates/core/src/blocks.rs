//! Composite blocks shared by the U-Net family: residual double-conv blocks,
//! plain double-conv blocks, dilated spatial pyramid pooling and attention
//! gates on skip connections.

use ndarray::{Array4, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    relu_backward, relu_forward, sigmoid_backward, sigmoid_forward, AvgPool2, BatchNorm2d, Conv2d,
    Mode, Upsample2,
};
use crate::param::{join_name, HasParams, Param, Real};

/// conv 3x3 -> batch norm -> ReLU.
pub struct ConvBnRelu<F> {
    pub conv: Conv2d<F>,
    pub bn: BatchNorm2d<F>,
    relu_out: Option<Array4<F>>,
}

impl<F: Real> ConvBnRelu<F> {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(in_ch, out_ch, 3, 1, 1, false, rng),
            bn: BatchNorm2d::new(out_ch),
            relu_out: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        let y = relu_forward(&self.bn.forward(&self.conv.forward(x, mode)?, mode));
        if mode.is_train() {
            self.relu_out = Some(y.clone());
        }
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Array4<F>) -> Array4<F> {
        let y = self.relu_out.as_ref().expect("backward without forward");
        let d = relu_backward(y, grad);
        self.conv.backward(&self.bn.backward(&d))
    }
}

impl<F: Real> HasParams<F> for ConvBnRelu<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.conv.visit(&join_name(prefix, "conv"), f);
        self.bn.visit(&join_name(prefix, "bn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.conv.visit_mut(&join_name(prefix, "conv"), f);
        self.bn.visit_mut(&join_name(prefix, "bn"), f);
    }
}

/// Two conv-bn-ReLU stages, the building block of the plain U-Net.
pub struct DoubleConv<F> {
    pub a: ConvBnRelu<F>,
    pub b: ConvBnRelu<F>,
}

impl<F: Real> DoubleConv<F> {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        DoubleConv {
            a: ConvBnRelu::new(in_ch, out_ch, rng),
            b: ConvBnRelu::new(out_ch, out_ch, rng),
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        self.b.forward(&self.a.forward(x, mode)?, mode)
    }

    pub fn backward(&mut self, grad: &Array4<F>) -> Array4<F> {
        self.a.backward(&self.b.backward(grad))
    }
}

impl<F: Real> HasParams<F> for DoubleConv<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.a.visit(&join_name(prefix, "c1"), f);
        self.b.visit(&join_name(prefix, "c2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.a.visit_mut(&join_name(prefix, "c1"), f);
        self.b.visit_mut(&join_name(prefix, "c2"), f);
    }
}

/// Residual double-conv block:
/// `out = ReLU(BN(conv(ReLU(BN(conv(x))))) + shortcut(x))`.
///
/// The shortcut is the identity when channel counts match and a 1x1
/// projection otherwise. 3x3 kernels, stride 1, padding 1, so spatial
/// dimensions are preserved.
pub struct ResidualBlock<F> {
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    conv2: Conv2d<F>,
    bn2: BatchNorm2d<F>,
    shortcut: Option<Conv2d<F>>,
    relu1_out: Option<Array4<F>>,
    out: Option<Array4<F>>,
}

impl<F: Real> ResidualBlock<F> {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let shortcut = (in_ch != out_ch).then(|| Conv2d::new(in_ch, out_ch, 1, 0, 1, false, rng));
        ResidualBlock {
            conv1: Conv2d::new(in_ch, out_ch, 3, 1, 1, false, rng),
            bn1: BatchNorm2d::new(out_ch),
            conv2: Conv2d::new(out_ch, out_ch, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(out_ch),
            shortcut,
            relu1_out: None,
            out: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        let h = relu_forward(&self.bn1.forward(&self.conv1.forward(x, mode)?, mode));
        let branch = self.bn2.forward(&self.conv2.forward(&h, mode)?, mode);
        let shortcut = match &mut self.shortcut {
            Some(proj) => proj.forward(x, mode)?,
            None => x.clone(),
        };
        let out = relu_forward(&(&branch + &shortcut));
        if mode.is_train() {
            self.relu1_out = Some(h);
            self.out = Some(out.clone());
        }
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Array4<F>) -> Array4<F> {
        let out = self.out.as_ref().expect("backward without forward");
        let d = relu_backward(out, grad);
        let d_branch = self.bn2.backward(&d);
        let d_h = self.conv2.backward(&d_branch);
        let h = self.relu1_out.as_ref().unwrap();
        let d_h = relu_backward(h, &d_h);
        let dx_branch = self.conv1.backward(&self.bn1.backward(&d_h));
        let dx_short = match &mut self.shortcut {
            Some(proj) => proj.backward(&d),
            None => d,
        };
        dx_branch + dx_short
    }
}

impl<F: Real> HasParams<F> for ResidualBlock<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.conv1.visit(&join_name(prefix, "conv1"), f);
        self.bn1.visit(&join_name(prefix, "bn1"), f);
        self.conv2.visit(&join_name(prefix, "conv2"), f);
        self.bn2.visit(&join_name(prefix, "bn2"), f);
        if let Some(s) = &self.shortcut {
            s.visit(&join_name(prefix, "shortcut"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.conv1.visit_mut(&join_name(prefix, "conv1"), f);
        self.bn1.visit_mut(&join_name(prefix, "bn1"), f);
        self.conv2.visit_mut(&join_name(prefix, "conv2"), f);
        self.bn2.visit_mut(&join_name(prefix, "bn2"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_mut(&join_name(prefix, "shortcut"), f);
        }
    }
}

/// Spatial pyramid of dilated 3x3 convolutions.
///
/// One branch per dilation rate (padding = rate, so spatial dims are kept),
/// each followed by ReLU; branch outputs are concatenated along the channel
/// axis and fused back to `out_channels` by a 1x1 convolution plus ReLU.
pub struct Aspp<F> {
    branches: Vec<Conv2d<F>>,
    fuse: Conv2d<F>,
    rates: Vec<usize>,
    branch_ch: usize,
    branch_outs: Option<Vec<Array4<F>>>,
    fuse_out: Option<Array4<F>>,
}

impl<F: Real> Aspp<F> {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        branch_ch: usize,
        out_ch: usize,
        rates: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        validate_rates(rates)?;
        let branches = rates
            .iter()
            .map(|&r| Conv2d::new(in_ch, branch_ch, 3, r, r, true, rng))
            .collect();
        let fuse = Conv2d::new(branch_ch * rates.len(), out_ch, 1, 0, 1, true, rng);
        Ok(Aspp {
            branches,
            fuse,
            rates: rates.to_vec(),
            branch_ch,
            branch_outs: None,
            fuse_out: None,
        })
    }

    pub fn rates(&self) -> &[usize] {
        &self.rates
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        let mut outs = Vec::with_capacity(self.branches.len());
        for conv in &mut self.branches {
            outs.push(relu_forward(&conv.forward(x, mode)?));
        }
        let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
        let cat = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::shape(format!("aspp concat: {e}")))?;
        let fused = relu_forward(&self.fuse.forward(&cat, mode)?);
        if mode.is_train() {
            self.branch_outs = Some(outs);
            self.fuse_out = Some(fused.clone());
        }
        Ok(fused)
    }

    pub fn backward(&mut self, grad: &Array4<F>) -> Array4<F> {
        let fused = self.fuse_out.as_ref().expect("backward without forward");
        let dcat = self.fuse.backward(&relu_backward(fused, grad));
        let branch_outs = self.branch_outs.as_ref().unwrap();
        let mut dx: Option<Array4<F>> = None;
        for (i, conv) in self.branches.iter_mut().enumerate() {
            let slice = dcat
                .slice(ndarray::s![
                    ..,
                    i * self.branch_ch..(i + 1) * self.branch_ch,
                    ..,
                    ..
                ])
                .to_owned();
            let d = conv.backward(&relu_backward(&branch_outs[i], &slice));
            dx = Some(match dx {
                Some(acc) => acc + d,
                None => d,
            });
        }
        dx.expect("aspp has at least one branch")
    }
}

fn validate_rates(rates: &[usize]) -> Result<()> {
    if rates.is_empty() {
        return Err(Error::config("aspp dilation rates must be nonempty"));
    }
    if rates[0] != 1 {
        return Err(Error::config("first aspp dilation rate must be 1"));
    }
    if rates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("aspp dilation rates must be strictly increasing"));
    }
    Ok(())
}

impl<F: Real> HasParams<F> for Aspp<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        for (i, b) in self.branches.iter().enumerate() {
            b.visit(&join_name(prefix, &format!("branch{i}")), f);
        }
        self.fuse.visit(&join_name(prefix, "fuse"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, b) in self.branches.iter_mut().enumerate() {
            b.visit_mut(&join_name(prefix, &format!("branch{i}")), f);
        }
        self.fuse.visit_mut(&join_name(prefix, "fuse"), f);
    }
}

/// How the gating signal was brought to the skip resolution.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum GateResample {
    None,
    Up2,
    Down2,
}

/// Attention gate on a skip connection.
///
/// `alpha = sigmoid(psi(ReLU(W_g g + W_x x)))`, applied multiplicatively to
/// the skip features with channel broadcast. The gating signal may sit at
/// the skip resolution or one 2x step away; anything else is rejected.
pub struct AttentionGate<F> {
    w_g: Conv2d<F>,
    w_x: Conv2d<F>,
    psi: Conv2d<F>,
    relu_out: Option<Array4<F>>,
    alpha: Option<Array4<F>>,
    x_skip: Option<Array4<F>>,
    resample: GateResample,
}

impl<F: Real> AttentionGate<F> {
    pub fn new<R: Rng + ?Sized>(x_ch: usize, g_ch: usize, rng: &mut R) -> Self {
        let inter = (x_ch / 2).max(1);
        AttentionGate {
            w_g: Conv2d::new(g_ch, inter, 1, 0, 1, true, rng),
            w_x: Conv2d::new(x_ch, inter, 1, 0, 1, true, rng),
            psi: Conv2d::new(inter, 1, 1, 0, 1, true, rng),
            relu_out: None,
            alpha: None,
            x_skip: None,
            resample: GateResample::None,
        }
    }

    pub fn forward(&mut self, x_skip: &Array4<F>, g: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        let (_, _, xh, xw) = x_skip.dim();
        let (_, _, gh, gw) = g.dim();
        let pg = self.w_g.forward(g, mode)?;
        let px = self.w_x.forward(x_skip, mode)?;
        let (pg, resample) = if (gh, gw) == (xh, xw) {
            (pg, GateResample::None)
        } else if (gh * 2, gw * 2) == (xh, xw) {
            (Upsample2::forward(&pg), GateResample::Up2)
        } else if (gh, gw) == (xh * 2, xw * 2) {
            (AvgPool2::forward(&pg)?, GateResample::Down2)
        } else {
            return Err(Error::config(format!(
                "attention gate cannot reconcile gating {gh}x{gw} with skip {xh}x{xw}"
            )));
        };
        let s = relu_forward(&(&pg + &px));
        let alpha = sigmoid_forward(&self.psi.forward(&s, mode)?);
        let out = broadcast_mul(x_skip, &alpha);
        if mode.is_train() {
            self.relu_out = Some(s);
            self.alpha = Some(alpha);
            self.x_skip = Some(x_skip.clone());
            self.resample = resample;
        }
        Ok(out)
    }

    /// Returns `(d_x_skip, d_g)`.
    pub fn backward(&mut self, grad: &Array4<F>) -> (Array4<F>, Array4<F>) {
        let alpha = self.alpha.as_ref().expect("backward without forward");
        let x_skip = self.x_skip.as_ref().unwrap();
        let s = self.relu_out.as_ref().unwrap();

        // out = alpha (B,1,H,W) * x_skip (B,C,H,W)
        let dx_direct = broadcast_mul(grad, alpha);
        let dalpha = channel_sum(&(grad * x_skip));
        let dpsi = sigmoid_backward(alpha, &dalpha);
        let ds = relu_backward(s, &self.psi.backward(&dpsi));
        let dpx = ds.clone();
        let dpg = match self.resample {
            GateResample::None => ds,
            GateResample::Up2 => Upsample2::backward(&ds),
            GateResample::Down2 => AvgPool2::backward(&ds),
        };
        let dg = self.w_g.backward(&dpg);
        let dx_proj = self.w_x.backward(&dpx);
        (dx_direct + dx_proj, dg)
    }
}

impl<F: Real> HasParams<F> for AttentionGate<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.w_g.visit(&join_name(prefix, "w_g"), f);
        self.w_x.visit(&join_name(prefix, "w_x"), f);
        self.psi.visit(&join_name(prefix, "psi"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.w_g.visit_mut(&join_name(prefix, "w_g"), f);
        self.w_x.visit_mut(&join_name(prefix, "w_x"), f);
        self.psi.visit_mut(&join_name(prefix, "psi"), f);
    }
}

/// Multiply `(B, C, H, W)` by a `(B, 1, H, W)` map, broadcasting channels.
fn broadcast_mul<F: Real>(x: &Array4<F>, a: &Array4<F>) -> Array4<F> {
    let mut out = x.clone();
    for mut ch in out.axis_iter_mut(Axis(1)) {
        ch *= &a.index_axis(Axis(1), 0);
    }
    out
}

/// Sum `(B, C, H, W)` over channels into `(B, 1, H, W)`.
fn channel_sum<F: Real>(x: &Array4<F>) -> Array4<F> {
    let (b, _, h, w) = x.dim();
    let summed = x.sum_axis(Axis(1));
    summed.into_shape_with_order((b, 1, h, w)).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn(shape, || f64::std_normal(&mut rng))
    }

    #[test]
    fn residual_block_preserves_spatial_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut block = ResidualBlock::<f64>::new(8, 8, &mut rng);
        let x = randn((1, 8, 16, 16), 1);
        let y = block.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.dim(), (1, 8, 16, 16));
    }

    #[test]
    fn residual_degenerates_to_relu_with_zero_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut block = ResidualBlock::<f64>::new(4, 4, &mut rng);
        block.conv1.weight.value.fill(0.0);
        block.conv2.weight.value.fill(0.0);
        let x = randn((2, 4, 6, 6), 3);
        let y = block.forward(&x, Mode::Train).unwrap();
        let expected = relu_forward(&x);
        assert_eq!(y, expected);
    }

    #[test]
    fn aspp_preserves_dims_and_rejects_empty_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut aspp = Aspp::<f64>::new(64, 32, 64, &[1, 2, 4, 8], &mut rng).unwrap();
        let x = randn((1, 64, 16, 16), 5);
        let y = aspp.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.dim(), (1, 64, 16, 16));
        assert!(Aspp::<f64>::new(8, 8, 8, &[], &mut rng).is_err());
        assert!(Aspp::<f64>::new(8, 8, 8, &[2, 4], &mut rng).is_err());
        assert!(Aspp::<f64>::new(8, 8, 8, &[1, 4, 2], &mut rng).is_err());
    }

    #[test]
    fn aspp_single_rate_delta_kernel_is_relu_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ch = 3;
        let mut aspp = Aspp::<f64>::new(ch, ch, ch, &[1], &mut rng).unwrap();
        // centered delta kernels: branch conv copies its input channel
        aspp.branches[0].weight.value.fill(0.0);
        for c in 0..ch {
            aspp.branches[0].weight.value[[c, c, 1, 1]] = 1.0;
        }
        aspp.branches[0].bias.as_mut().unwrap().value.fill(0.0);
        // identity 1x1 fusion
        aspp.fuse.weight.value.fill(0.0);
        for c in 0..ch {
            aspp.fuse.weight.value[[c, c, 0, 0]] = 1.0;
        }
        aspp.fuse.bias.as_mut().unwrap().value.fill(0.0);
        let x = randn((1, ch, 5, 5), 7);
        let y = aspp.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y, relu_forward(&x));
    }

    #[test]
    fn attention_gate_zero_weights_halve_skip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut gate = AttentionGate::<f64>::new(4, 6, &mut rng);
        gate.w_g.weight.value.fill(0.0);
        gate.w_x.weight.value.fill(0.0);
        gate.psi.weight.value.fill(0.0);
        gate.w_g.bias.as_mut().unwrap().value.fill(0.0);
        gate.w_x.bias.as_mut().unwrap().value.fill(0.0);
        gate.psi.bias.as_mut().unwrap().value.fill(0.0);
        let x = randn((1, 4, 8, 8), 9);
        let g = randn((1, 6, 4, 4), 10);
        let y = gate.forward(&x, &g, Mode::Eval).unwrap();
        let expected = x.mapv(|v| 0.5 * v);
        for (a, e) in y.iter().zip(expected.iter()) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_gate_zero_skip_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut gate = AttentionGate::<f64>::new(3, 3, &mut rng);
        let x = Array4::<f64>::zeros((1, 3, 8, 8));
        let g = randn((1, 3, 4, 4), 12);
        let y = gate.forward(&x, &g, Mode::Eval).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_gate_alpha_bounds_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut gate = AttentionGate::<f64>::new(5, 7, &mut rng);
        let x = randn((2, 5, 8, 8), 14);
        let g = randn((2, 7, 4, 4), 15);
        let y = gate.forward(&x, &g, Mode::Eval).unwrap();
        for (a, b) in y.iter().zip(x.iter()) {
            assert!(a.abs() <= b.abs() + 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_gate_rejects_bad_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut gate = AttentionGate::<f64>::new(3, 3, &mut rng);
        let x = randn((1, 3, 16, 16), 17);
        let g = randn((1, 3, 4, 4), 18);
        assert!(matches!(
            gate.forward(&x, &g, Mode::Eval),
            Err(Error::Config(_))
        ));
    }
}
