//! The improved U-Net (residual blocks + dilated pyramid bottleneck +
//! attention-gated skips) and the plain baseline U-Net, assembled from the
//! blocks in [`crate::blocks`].

use ndarray::{Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Aspp, AttentionGate, ConvBnRelu, DoubleConv, ResidualBlock};
use crate::error::{Error, Result};
use crate::nn::{sigmoid_backward, sigmoid_forward, Conv2d, MaxPool2, Mode, Upsample2};
use crate::param::{join_name, HasParams, Param, Real};

/// Number of encoder/decoder levels; the input must be divisible by 2^DEPTH.
pub const UNET_DEPTH: usize = 4;

/// Architecture hyperparameters of the improved U-Net.
#[derive(Debug, Clone, PartialEq)]
pub struct ImprovedUNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub channel_multiplier: usize,
    pub aspp_dilation_rates: Vec<usize>,
    pub use_attention_gates: bool,
    pub use_residual_blocks: bool,
}

impl Default for ImprovedUNetConfig {
    fn default() -> Self {
        ImprovedUNetConfig {
            in_channels: 3,
            out_channels: 1,
            base_channels: 16,
            channel_multiplier: 2,
            aspp_dilation_rates: vec![1, 2, 4, 8],
            use_attention_gates: true,
            use_residual_blocks: true,
        }
    }
}

impl ImprovedUNetConfig {
    /// Desk-scale variant used for fast experiments on 64x64 scenes.
    pub fn desk() -> Self {
        ImprovedUNetConfig {
            base_channels: 8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 1 {
            return Err(Error::config("base_channels must be >= 1"));
        }
        if self.channel_multiplier < 1 {
            return Err(Error::config("channel_multiplier must be >= 1"));
        }
        if self.in_channels < 1 || self.out_channels != 1 {
            return Err(Error::config("expected in_channels >= 1 and out_channels == 1"));
        }
        if self.aspp_dilation_rates.is_empty() {
            return Err(Error::config("aspp dilation rates must be nonempty"));
        }
        Ok(())
    }

    fn encoder_channels(&self) -> Vec<usize> {
        (0..UNET_DEPTH)
            .map(|i| self.base_channels * self.channel_multiplier.pow(i as u32))
            .collect()
    }

    fn decoder_channels(&self) -> Vec<usize> {
        let m = self.channel_multiplier;
        let b = self.base_channels;
        vec![b * m * m, b * m, b, b]
    }
}

enum Block<F> {
    Residual(ResidualBlock<F>),
    Double(DoubleConv<F>),
}

impl<F: Real> Block<F> {
    fn new<R: Rng + ?Sized>(residual: bool, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        if residual {
            Block::Residual(ResidualBlock::new(in_ch, out_ch, rng))
        } else {
            Block::Double(DoubleConv::new(in_ch, out_ch, rng))
        }
    }

    fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        match self {
            Block::Residual(b) => b.forward(x, mode),
            Block::Double(b) => b.forward(x, mode),
        }
    }

    fn backward(&mut self, grad: &Array4<F>) -> Array4<F> {
        match self {
            Block::Residual(b) => b.backward(grad),
            Block::Double(b) => b.backward(grad),
        }
    }
}

impl<F: Real> HasParams<F> for Block<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        match self {
            Block::Residual(b) => b.visit(prefix, f),
            Block::Double(b) => b.visit(prefix, f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        match self {
            Block::Residual(b) => b.visit_mut(prefix, f),
            Block::Double(b) => b.visit_mut(prefix, f),
        }
    }
}

enum Bottleneck<F> {
    Aspp(Aspp<F>),
    Plain(Block<F>),
}

struct DecoderStage<F> {
    upconv: ConvBnRelu<F>,
    gate: Option<AttentionGate<F>>,
    block: Block<F>,
    up_channels: usize,
}

/// Shared encoder/decoder skeleton behind both U-Net variants.
struct UNetCore<F> {
    encoder: Vec<Block<F>>,
    pools: Vec<MaxPool2>,
    bottleneck: Bottleneck<F>,
    decoder: Vec<DecoderStage<F>>,
    head: Conv2d<F>,
    head_out: Option<Array4<F>>,
    in_channels: usize,
}

impl<F: Real> UNetCore<F> {
    #[allow(clippy::too_many_arguments)]
    fn build<R: Rng + ?Sized>(
        in_channels: usize,
        enc_ch: &[usize],
        bottleneck_ch: usize,
        dec_ch: &[usize],
        aspp_rates: Option<&[usize]>,
        gates: bool,
        residual: bool,
        rng: &mut R,
    ) -> Result<Self> {
        assert_eq!(enc_ch.len(), UNET_DEPTH);
        assert_eq!(dec_ch.len(), UNET_DEPTH);

        let mut encoder = Vec::new();
        let mut prev = in_channels;
        for &ch in enc_ch {
            encoder.push(Block::new(residual, prev, ch, rng));
            prev = ch;
        }
        let pools = (0..UNET_DEPTH).map(|_| MaxPool2::new()).collect();

        let bottleneck = match aspp_rates {
            Some(rates) => Bottleneck::Aspp(Aspp::new(
                enc_ch[UNET_DEPTH - 1],
                (bottleneck_ch / 2).max(1),
                bottleneck_ch,
                rates,
                rng,
            )?),
            None => Bottleneck::Plain(Block::new(
                residual,
                enc_ch[UNET_DEPTH - 1],
                bottleneck_ch,
                rng,
            )),
        };

        let mut decoder = Vec::new();
        let mut carry = bottleneck_ch;
        for (i, &ch) in dec_ch.iter().enumerate() {
            let skip_ch = enc_ch[UNET_DEPTH - 1 - i];
            let gate = gates.then(|| AttentionGate::new(skip_ch, carry, rng));
            decoder.push(DecoderStage {
                upconv: ConvBnRelu::new(carry, ch, rng),
                gate,
                block: Block::new(residual, ch + skip_ch, ch, rng),
                up_channels: ch,
            });
            carry = ch;
        }

        let head = Conv2d::new(dec_ch[UNET_DEPTH - 1], 1, 1, 0, 1, true, rng);
        Ok(UNetCore {
            encoder,
            pools,
            bottleneck,
            decoder,
            head,
            head_out: None,
            in_channels,
        })
    }

    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "expected {} input channels, got {c}",
                self.in_channels
            )));
        }
        let div = 1 << UNET_DEPTH;
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape(format!(
                "input spatial dims must be divisible by {div}, got {h}x{w}"
            )));
        }
        Ok(())
    }

    fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(UNET_DEPTH);
        let mut cur = x.clone();
        for (block, pool) in self.encoder.iter_mut().zip(&mut self.pools) {
            let f = block.forward(&cur, mode)?;
            cur = pool.forward(&f)?;
            skips.push(f);
        }
        cur = match &mut self.bottleneck {
            Bottleneck::Aspp(aspp) => aspp.forward(&cur, mode)?,
            Bottleneck::Plain(block) => block.forward(&cur, mode)?,
        };
        for (i, stage) in self.decoder.iter_mut().enumerate() {
            let skip = &skips[UNET_DEPTH - 1 - i];
            let gated = match &mut stage.gate {
                Some(gate) => gate.forward(skip, &cur, mode)?,
                None => skip.clone(),
            };
            let up = stage.upconv.forward(&Upsample2::forward(&cur), mode)?;
            let cat = ndarray::concatenate(Axis(1), &[up.view(), gated.view()])
                .map_err(|e| Error::shape(format!("decoder concat: {e}")))?;
            cur = stage.block.forward(&cat, mode)?;
        }
        let logits = self.head.forward(&cur, mode)?;
        let prob = sigmoid_forward(&logits);
        if mode.is_train() {
            self.head_out = Some(prob.clone());
        }
        Ok(prob)
    }

    fn backward(&mut self, grad: &Array4<F>) -> Array4<F> {
        let prob = self.head_out.as_ref().expect("backward without forward");
        let mut cur = self.head.backward(&sigmoid_backward(prob, grad));

        let mut skip_grads: Vec<Option<Array4<F>>> = (0..UNET_DEPTH).map(|_| None).collect();
        for (i, stage) in self.decoder.iter_mut().enumerate().rev() {
            let dcat = stage.block.backward(&cur);
            let du = dcat
                .slice(ndarray::s![.., ..stage.up_channels, .., ..])
                .to_owned();
            let dgated = dcat
                .slice(ndarray::s![.., stage.up_channels.., .., ..])
                .to_owned();
            let dg_up = Upsample2::backward(&stage.upconv.backward(&du));
            let (dskip, dg_gate) = match &mut stage.gate {
                Some(gate) => {
                    let (ds, dg) = gate.backward(&dgated);
                    (ds, Some(dg))
                }
                None => (dgated, None),
            };
            let slot = &mut skip_grads[UNET_DEPTH - 1 - i];
            *slot = Some(match slot.take() {
                Some(acc) => acc + &dskip,
                None => dskip,
            });
            cur = match dg_gate {
                Some(dg) => dg_up + dg,
                None => dg_up,
            };
        }
        cur = match &mut self.bottleneck {
            Bottleneck::Aspp(aspp) => aspp.backward(&cur),
            Bottleneck::Plain(block) => block.backward(&cur),
        };
        for (i, (block, pool)) in self.encoder.iter_mut().zip(&mut self.pools).enumerate().rev() {
            let mut df = pool.backward(&cur);
            if let Some(ds) = skip_grads[i].take() {
                df += &ds;
            }
            cur = block.backward(&df);
        }
        cur
    }
}

impl<F: Real> HasParams<F> for UNetCore<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&join_name(prefix, &format!("enc{i}")), f);
        }
        match &self.bottleneck {
            Bottleneck::Aspp(a) => a.visit(&join_name(prefix, "aspp"), f),
            Bottleneck::Plain(b) => b.visit(&join_name(prefix, "bottleneck"), f),
        }
        for (i, d) in self.decoder.iter().enumerate() {
            let p = join_name(prefix, &format!("dec{i}"));
            d.upconv.visit(&join_name(&p, "up"), f);
            if let Some(g) = &d.gate {
                g.visit(&join_name(&p, "gate"), f);
            }
            d.block.visit(&join_name(&p, "block"), f);
        }
        self.head.visit(&join_name(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_mut(&join_name(prefix, &format!("enc{i}")), f);
        }
        match &mut self.bottleneck {
            Bottleneck::Aspp(a) => a.visit_mut(&join_name(prefix, "aspp"), f),
            Bottleneck::Plain(b) => b.visit_mut(&join_name(prefix, "bottleneck"), f),
        }
        for (i, d) in self.decoder.iter_mut().enumerate() {
            let p = join_name(prefix, &format!("dec{i}"));
            d.upconv.visit_mut(&join_name(&p, "up"), f);
            if let Some(g) = &mut d.gate {
                g.visit_mut(&join_name(&p, "gate"), f);
            }
            d.block.visit_mut(&join_name(&p, "block"), f);
        }
        self.head.visit_mut(&join_name(prefix, "head"), f);
    }
}

/// Four-level U-Net with residual blocks, dilated-pyramid bottleneck and
/// attention-gated skip connections.
pub struct ImprovedUNet<F> {
    core: UNetCore<F>,
    config: ImprovedUNetConfig,
}

impl<F: Real> ImprovedUNet<F> {
    pub fn new(config: ImprovedUNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = config.encoder_channels();
        let bottleneck_ch = enc[UNET_DEPTH - 1];
        let core = UNetCore::build(
            config.in_channels,
            &enc,
            bottleneck_ch,
            &config.decoder_channels(),
            Some(config.aspp_dilation_rates.as_slice()),
            config.use_attention_gates,
            config.use_residual_blocks,
            &mut rng,
        )?;
        Ok(ImprovedUNet { core, config })
    }

    pub fn config(&self) -> &ImprovedUNetConfig {
        &self.config
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        self.core.forward(x, mode)
    }

    pub fn backward(&mut self, grad: &Array4<F>) -> Array4<F> {
        self.core.backward(grad)
    }
}

impl<F: Real> HasParams<F> for ImprovedUNet<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.core.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.core.visit_mut(prefix, f);
    }
}

/// Baseline U-Net: plain double-conv blocks, no pyramid bottleneck, no
/// attention gates, channel growth capped to stay near half a million
/// parameters at the default width.
pub struct BasicUNet<F> {
    core: UNetCore<F>,
    base_channels: usize,
}

impl<F: Real> BasicUNet<F> {
    pub fn new(base_channels: usize, seed: u64) -> Result<Self> {
        if base_channels < 1 {
            return Err(Error::config("base_channels must be >= 1"));
        }
        let b = base_channels;
        let enc = [b, 2 * b, 4 * b, 4 * b];
        let dec = [4 * b, 4 * b, 2 * b, b];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let core = UNetCore::build(3, &enc, 4 * b, &dec, None, false, false, &mut rng)?;
        Ok(BasicUNet {
            core,
            base_channels,
        })
    }

    pub fn base_channels(&self) -> usize {
        self.base_channels
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        self.core.forward(x, mode)
    }

    pub fn backward(&mut self, grad: &Array4<F>) -> Array4<F> {
        self.core.backward(grad)
    }
}

impl<F: Real> HasParams<F> for BasicUNet<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.core.visit(prefix, f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.core.visit_mut(prefix, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::count_parameters;

    #[test]
    fn improved_unet_shapes_and_range() {
        let mut net = ImprovedUNet::<f32>::new(ImprovedUNetConfig::desk(), 0).unwrap();
        let x = Array4::<f32>::from_elem((1, 3, 64, 64), 0.5);
        let y = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.dim(), (1, 1, 64, 64));
        assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn improved_unet_rejects_indivisible_input() {
        let mut net = ImprovedUNet::<f32>::new(ImprovedUNetConfig::desk(), 0).unwrap();
        let x = Array4::<f32>::zeros((1, 3, 100, 100));
        assert!(matches!(net.forward(&x, Mode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn improved_unet_default_parameter_count_near_one_million() {
        let net = ImprovedUNet::<f32>::new(ImprovedUNetConfig::default(), 0).unwrap();
        let n = count_parameters(&net);
        assert!(
            (700_000..=1_300_000).contains(&n),
            "improved U-Net parameter count {n} outside window"
        );
    }

    #[test]
    fn basic_unet_default_parameter_count_near_half_million() {
        let net = BasicUNet::<f32>::new(16, 0).unwrap();
        let n = count_parameters(&net);
        assert!(
            (350_000..=650_000).contains(&n),
            "basic U-Net parameter count {n} outside window"
        );
    }

    #[test]
    fn basic_unet_forward_48() {
        let mut net = BasicUNet::<f32>::new(4, 0).unwrap();
        let x = Array4::<f32>::from_elem((1, 3, 48, 48), 0.2);
        let y = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.dim(), (1, 1, 48, 48));
        assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
