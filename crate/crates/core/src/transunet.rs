//! Hybrid CNN/transformer segmentation model: a convolutional stem extracts
//! low-level features, the final stem plane is tokenized into non-overlapping
//! patches (N = H*W / P^2) processed by a multi-head self-attention encoder,
//! and a skip-connected upscaling decoder brings tokens back to pixel
//! probabilities.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::DoubleConv;
use crate::error::{Error, Result};
use crate::nn::{
    relu_backward, relu_forward, sigmoid_backward, sigmoid_forward, Conv2d, LayerNorm, Linear,
    MaxPool2, Mode, Upsample2,
};
use crate::param::{join_name, HasParams, Param, Real};

/// A batch of token sequences plus the patch-grid geometry they came from.
#[derive(Debug, Clone)]
pub struct PatchSequence<F> {
    /// `(batch, tokens, hidden)`
    pub tokens: Array3<F>,
    /// `(h_p, w_p)` with `h_p * w_p == tokens.dim().1`
    pub grid: (usize, usize),
}

/// Per-head attention maps, `(batch, heads, tokens, tokens)`; each row is a
/// probability distribution over keys.
pub type AttentionWeights<F> = ndarray::Array4<F>;

/// Rearrange `(B, C, H, W)` into `(B, N, P*P*C)` row-major patch vectors.
/// Pure data movement; [`fold_patches`] is its exact inverse.
pub fn extract_patches<F: Real>(plane: &Array4<F>, p: usize) -> Result<Array3<F>> {
    let (b, c, h, w) = plane.dim();
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!(
            "plane {h}x{w} not divisible into {p}x{p} patches"
        )));
    }
    let (hp, wp) = (h / p, w / p);
    let n = hp * wp;
    let mut out = Array3::<F>::zeros((b, n, p * p * c));
    for bi in 0..b {
        for py in 0..hp {
            for px in 0..wp {
                let t = py * wp + px;
                for ci in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            out[[bi, t, (ci * p + dy) * p + dx]] =
                                plane[[bi, ci, py * p + dy, px * p + dx]];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`extract_patches`].
pub fn fold_patches<F: Real>(
    patches: &Array3<F>,
    grid: (usize, usize),
    channels: usize,
    p: usize,
) -> Array4<F> {
    let (b, n, d) = patches.dim();
    let (hp, wp) = grid;
    assert_eq!(n, hp * wp);
    assert_eq!(d, p * p * channels);
    let mut out = Array4::<F>::zeros((b, channels, hp * p, wp * p));
    for bi in 0..b {
        for py in 0..hp {
            for px in 0..wp {
                let t = py * wp + px;
                for ci in 0..channels {
                    for dy in 0..p {
                        for dx in 0..p {
                            out[[bi, ci, py * p + dy, px * p + dx]] =
                                patches[[bi, t, (ci * p + dy) * p + dx]];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Tokenizer: flatten P x P patches of the stem's final plane, project them to
/// the hidden size and add learned position embeddings (row-major order).
pub struct PatchEmbed<F> {
    proj: Linear<F>,
    pub pos: Param<F>, // (N, D), zero-initialized
    patch: usize,
    channels: usize,
    grid: (usize, usize),
}

impl<F: Real> PatchEmbed<F> {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        patch: usize,
        grid: (usize, usize),
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        PatchEmbed {
            proj: Linear::new(patch * patch * channels, hidden, rng),
            pos: Param::zeros(&[grid.0 * grid.1, hidden]),
            patch,
            channels,
            grid,
        }
    }

    pub fn forward(&mut self, plane: &Array4<F>, mode: Mode) -> Result<PatchSequence<F>> {
        let (_, c, h, w) = plane.dim();
        if c != self.channels {
            return Err(Error::shape(format!(
                "patch embed expects {} channels, got {c}",
                self.channels
            )));
        }
        let grid = (h / self.patch, w / self.patch);
        let raw = extract_patches(plane, self.patch)?;
        if grid != self.grid {
            return Err(Error::shape(format!(
                "token grid {grid:?} does not match the configured {:?} (position embeddings are learned per grid)",
                self.grid
            )));
        }
        let mut tokens = self.proj.forward(&raw, mode);
        for bi in 0..tokens.dim().0 {
            for t in 0..tokens.dim().1 {
                for d in 0..tokens.dim().2 {
                    tokens[[bi, t, d]] = tokens[[bi, t, d]] + self.pos.value[[t, d]];
                }
            }
        }
        Ok(PatchSequence { tokens, grid })
    }

    pub fn backward(&mut self, grad: &Array3<F>) -> Array4<F> {
        let (b, n, d) = grad.dim();
        let mut dpos = Array2::<F>::zeros((n, d));
        for bi in 0..b {
            for t in 0..n {
                for di in 0..d {
                    dpos[[t, di]] = dpos[[t, di]] + grad[[bi, t, di]];
                }
            }
        }
        self.pos.accumulate(&dpos.into_dyn());
        let draw = self.proj.backward(grad);
        fold_patches_grad(&draw, self.grid, self.channels, self.patch)
    }
}

// gradient of extract_patches is fold_patches (pure permutation)
fn fold_patches_grad<F: Real>(
    grad: &Array3<F>,
    grid: (usize, usize),
    channels: usize,
    p: usize,
) -> Array4<F> {
    fold_patches(grad, grid, channels, p)
}

impl<F: Real> HasParams<F> for PatchEmbed<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.proj.visit(&join_name(prefix, "proj"), f);
        f(&join_name(prefix, "pos"), &self.pos);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.proj.visit_mut(&join_name(prefix, "proj"), f);
        f(&join_name(prefix, "pos"), &mut self.pos);
    }
}

fn split_heads<F: Real>(x: &Array3<F>, heads: usize) -> Array4<F> {
    let (b, n, d) = x.dim();
    let dh = d / heads;
    let mut out = Array4::<F>::zeros((b, heads, n, dh));
    for bi in 0..b {
        for hi in 0..heads {
            for ni in 0..n {
                for j in 0..dh {
                    out[[bi, hi, ni, j]] = x[[bi, ni, hi * dh + j]];
                }
            }
        }
    }
    out
}

fn merge_heads<F: Real>(x: &Array4<F>) -> Array3<F> {
    let (b, heads, n, dh) = x.dim();
    let mut out = Array3::<F>::zeros((b, n, heads * dh));
    for bi in 0..b {
        for hi in 0..heads {
            for ni in 0..n {
                for j in 0..dh {
                    out[[bi, ni, hi * dh + j]] = x[[bi, hi, ni, j]];
                }
            }
        }
    }
    out
}

fn softmax_rows<F: Real>(s: &Array2<F>) -> Array2<F> {
    let mut out = s.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Standard scaled dot-product multi-head self-attention.
pub struct MultiHeadAttention<F> {
    wq: Linear<F>,
    wk: Linear<F>,
    wv: Linear<F>,
    wo: Linear<F>,
    heads: usize,
    hidden: usize,
    cache: Option<MhaCache<F>>,
}

struct MhaCache<F> {
    q: Array4<F>,
    k: Array4<F>,
    v: Array4<F>,
    attn: Array4<F>,
}

impl<F: Real> MultiHeadAttention<F> {
    pub fn new<R: Rng + ?Sized>(hidden: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::config(format!(
                "hidden dim {hidden} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(hidden, hidden, rng),
            wk: Linear::new(hidden, hidden, rng),
            wv: Linear::new(hidden, hidden, rng),
            wo: Linear::new(hidden, hidden, rng),
            heads,
            hidden,
            cache: None,
        })
    }

    /// Returns the attended tokens and the per-head attention weights.
    pub fn forward(
        &mut self,
        tokens: &Array3<F>,
        mode: Mode,
    ) -> Result<(Array3<F>, AttentionWeights<F>)> {
        let (b, n, d) = tokens.dim();
        if d != self.hidden {
            return Err(Error::shape(format!(
                "attention expects hidden dim {}, got {d}",
                self.hidden
            )));
        }
        let dh = d / self.heads;
        let scale = F::from_f64c(1.0 / (dh as f64).sqrt());
        let q = split_heads(&self.wq.forward(tokens, mode), self.heads);
        let k = split_heads(&self.wk.forward(tokens, mode), self.heads);
        let v = split_heads(&self.wv.forward(tokens, mode), self.heads);

        let mut attn = Array4::<F>::zeros((b, self.heads, n, n));
        let mut headed = Array4::<F>::zeros((b, self.heads, n, dh));
        for bi in 0..b {
            for hi in 0..self.heads {
                let qm = q.index_axis(Axis(0), bi);
                let qm = qm.index_axis(Axis(0), hi);
                let km = k.index_axis(Axis(0), bi);
                let km = km.index_axis(Axis(0), hi);
                let vm = v.index_axis(Axis(0), bi);
                let vm = vm.index_axis(Axis(0), hi);
                let scores = qm.dot(&km.t()).mapv(|s| s * scale);
                let a = softmax_rows(&scores);
                let o = a.dot(&vm);
                attn.slice_mut(ndarray::s![bi, hi, .., ..]).assign(&a);
                headed.slice_mut(ndarray::s![bi, hi, .., ..]).assign(&o);
            }
        }
        let out = self.wo.forward(&merge_heads(&headed), mode);
        if mode.is_train() {
            self.cache = Some(MhaCache { q, k, v, attn: attn.clone() });
        }
        Ok((out, attn))
    }

    pub fn backward(&mut self, grad: &Array3<F>) -> Array3<F> {
        let cache = self.cache.as_ref().expect("attention backward without forward");
        let (b, heads, n, dh) = cache.q.dim();
        let scale = F::from_f64c(1.0 / (dh as f64).sqrt());

        let dmerged = self.wo.backward(grad);
        let dheaded = split_heads(&dmerged, heads);
        let mut dq = Array4::<F>::zeros((b, heads, n, dh));
        let mut dk = Array4::<F>::zeros((b, heads, n, dh));
        let mut dv = Array4::<F>::zeros((b, heads, n, dh));
        for bi in 0..b {
            for hi in 0..heads {
                let a = cache.attn.slice(ndarray::s![bi, hi, .., ..]);
                let qm = cache.q.slice(ndarray::s![bi, hi, .., ..]);
                let km = cache.k.slice(ndarray::s![bi, hi, .., ..]);
                let vm = cache.v.slice(ndarray::s![bi, hi, .., ..]);
                let doh = dheaded.slice(ndarray::s![bi, hi, .., ..]);

                let da = doh.dot(&vm.t()); // (N, N)
                dv.slice_mut(ndarray::s![bi, hi, .., ..])
                    .assign(&a.t().dot(&doh));

                // softmax rows backward: ds = a * (da - rowsum(da * a))
                let mut ds = Array2::<F>::zeros((n, n));
                for i in 0..n {
                    let mut dot = F::zero();
                    for j in 0..n {
                        dot = dot + da[[i, j]] * a[[i, j]];
                    }
                    for j in 0..n {
                        ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot);
                    }
                }
                let ds_scaled = ds.mapv(|v| v * scale);
                dq.slice_mut(ndarray::s![bi, hi, .., ..])
                    .assign(&ds_scaled.dot(&km));
                dk.slice_mut(ndarray::s![bi, hi, .., ..])
                    .assign(&ds_scaled.t().dot(&qm));
            }
        }
        let dx = self.wq.backward(&merge_heads(&dq))
            + self.wk.backward(&merge_heads(&dk))
            + self.wv.backward(&merge_heads(&dv));
        dx
    }
}

impl<F: Real> HasParams<F> for MultiHeadAttention<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.wq.visit(&join_name(prefix, "wq"), f);
        self.wk.visit(&join_name(prefix, "wk"), f);
        self.wv.visit(&join_name(prefix, "wv"), f);
        self.wo.visit(&join_name(prefix, "wo"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.wq.visit_mut(&join_name(prefix, "wq"), f);
        self.wk.visit_mut(&join_name(prefix, "wk"), f);
        self.wv.visit_mut(&join_name(prefix, "wv"), f);
        self.wo.visit_mut(&join_name(prefix, "wo"), f);
    }
}

/// Pre-norm transformer block:
/// `x = x + MHA(LN(x)); x = x + MLP(LN(x))` with a ReLU two-layer MLP.
pub struct EncoderBlock<F> {
    ln1: LayerNorm<F>,
    attn: MultiHeadAttention<F>,
    ln2: LayerNorm<F>,
    fc1: Linear<F>,
    fc2: Linear<F>,
    relu_out: Option<Array3<F>>,
}

impl<F: Real> EncoderBlock<F> {
    pub fn new<R: Rng + ?Sized>(
        hidden: usize,
        heads: usize,
        mlp_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            ln1: LayerNorm::new(hidden),
            attn: MultiHeadAttention::new(hidden, heads, rng)?,
            ln2: LayerNorm::new(hidden),
            fc1: Linear::new(hidden, mlp_dim, rng),
            fc2: Linear::new(mlp_dim, hidden, rng),
            relu_out: None,
        })
    }

    pub fn forward(&mut self, x: &Array3<F>, mode: Mode) -> Result<Array3<F>> {
        let (attended, _) = self.attn.forward(&self.ln1.forward(x, mode), mode)?;
        let x1 = x + &attended;
        let h = relu_forward(&self.fc1.forward(&self.ln2.forward(&x1, mode), mode));
        let mlp = self.fc2.forward(&h, mode);
        if mode.is_train() {
            self.relu_out = Some(h);
        }
        Ok(x1 + mlp)
    }

    pub fn backward(&mut self, grad: &Array3<F>) -> Array3<F> {
        let h = self.relu_out.as_ref().expect("backward without forward");
        let dh = relu_backward(h, &self.fc2.backward(grad));
        let dx1 = grad + &self.ln2.backward(&self.fc1.backward(&dh));
        let dattn = self.attn.backward(&dx1);
        &dx1 + &self.ln1.backward(&dattn)
    }
}

impl<F: Real> HasParams<F> for EncoderBlock<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.ln1.visit(&join_name(prefix, "ln1"), f);
        self.attn.visit(&join_name(prefix, "attn"), f);
        self.ln2.visit(&join_name(prefix, "ln2"), f);
        self.fc1.visit(&join_name(prefix, "fc1"), f);
        self.fc2.visit(&join_name(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.ln1.visit_mut(&join_name(prefix, "ln1"), f);
        self.attn.visit_mut(&join_name(prefix, "attn"), f);
        self.ln2.visit_mut(&join_name(prefix, "ln2"), f);
        self.fc1.visit_mut(&join_name(prefix, "fc1"), f);
        self.fc2.visit_mut(&join_name(prefix, "fc2"), f);
    }
}

/// A stack of [`EncoderBlock`]s; an empty stack is the identity.
pub struct TransformerEncoder<F> {
    pub blocks: Vec<EncoderBlock<F>>,
}

impl<F: Real> TransformerEncoder<F> {
    pub fn new<R: Rng + ?Sized>(
        layers: usize,
        hidden: usize,
        heads: usize,
        mlp_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|_| EncoderBlock::new(hidden, heads, mlp_dim, rng))
            .collect::<Result<_>>()?;
        Ok(TransformerEncoder { blocks })
    }

    pub fn forward(&mut self, tokens: &Array3<F>, mode: Mode) -> Result<Array3<F>> {
        let mut cur = tokens.clone();
        for block in &mut self.blocks {
            cur = block.forward(&cur, mode)?;
        }
        Ok(cur)
    }

    pub fn backward(&mut self, grad: &Array3<F>) -> Array3<F> {
        let mut cur = grad.clone();
        for block in self.blocks.iter_mut().rev() {
            cur = block.backward(&cur);
        }
        cur
    }
}

impl<F: Real> HasParams<F> for TransformerEncoder<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join_name(prefix, &format!("layer{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join_name(prefix, &format!("layer{i}")), f);
        }
    }
}

/// Convolutional stem: each stage is a double-conv block followed by 2x max
/// pooling, so stage `k` emits features at `H / 2^k x W / 2^k`. All stage
/// outputs are kept for decoder skips; the last one is the tokenization
/// plane.
pub struct CnnStem<F> {
    stages: Vec<DoubleConv<F>>,
    pools: Vec<MaxPool2>,
    in_channels: usize,
}

impl<F: Real> CnnStem<F> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, channels: &[usize], rng: &mut R) -> Self {
        let mut stages = Vec::new();
        let mut prev = in_channels;
        for &ch in channels {
            stages.push(DoubleConv::new(prev, ch, rng));
            prev = ch;
        }
        let pools = (0..channels.len()).map(|_| MaxPool2::new()).collect();
        CnnStem {
            stages,
            pools,
            in_channels,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Returns `(skips, final_plane)`; the final plane is `skips.last()`.
    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<(Vec<Array4<F>>, Array4<F>)> {
        let (_, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "stem expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let div = 1usize << self.stages.len();
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape(format!(
                "input {h}x{w} not divisible by 2^{}",
                self.stages.len()
            )));
        }
        let mut skips = Vec::with_capacity(self.stages.len());
        let mut cur = x.clone();
        for (stage, pool) in self.stages.iter_mut().zip(&mut self.pools) {
            let f = stage.forward(&cur, mode)?;
            cur = pool.forward(&f)?;
            skips.push(cur.clone());
        }
        let plane = cur;
        Ok((skips, plane))
    }

    /// `grad` flows into the final plane; `skip_grads[k]` (if any) adds the
    /// gradient reaching stage k's output through the decoder skips.
    pub fn backward(&mut self, grad: &Array4<F>, skip_grads: Vec<Option<Array4<F>>>) -> Array4<F> {
        let mut cur = grad.clone();
        for (i, (stage, pool)) in self
            .stages
            .iter_mut()
            .zip(&mut self.pools)
            .enumerate()
            .rev()
        {
            if let Some(ds) = &skip_grads[i] {
                cur += ds;
            }
            let df = pool.backward(&cur);
            cur = stage.backward(&df);
        }
        cur
    }
}

impl<F: Real> HasParams<F> for CnnStem<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join_name(prefix, &format!("stage{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join_name(prefix, &format!("stage{i}")), f);
        }
    }
}

/// Architecture hyperparameters of the hybrid model.
#[derive(Debug, Clone, PartialEq)]
pub struct TransUNetConfig {
    /// Side length the position-embedding table is built for.
    pub image_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    /// Patch size on the stem's final feature plane (power of two).
    pub patch_size: usize,
    pub stem_channels: Vec<usize>,
}

impl TransUNetConfig {
    /// Desk-scale configuration for 64x64 scenes.
    pub fn desk() -> Self {
        TransUNetConfig {
            image_size: 64,
            in_channels: 3,
            out_channels: 1,
            hidden_dim: 64,
            num_layers: 4,
            num_heads: 4,
            mlp_dim: 128,
            patch_size: 2,
            stem_channels: vec![16, 32, 64],
        }
    }

    /// Full-scale configuration mirroring the large hybrid backbone geometry
    /// (16x tokenization stride, 12 layers, hidden 768).
    pub fn full() -> Self {
        TransUNetConfig {
            image_size: 256,
            in_channels: 3,
            out_channels: 1,
            hidden_dim: 768,
            num_layers: 12,
            num_heads: 12,
            mlp_dim: 3072,
            patch_size: 1,
            stem_channels: vec![64, 128, 256, 512],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "hidden_dim {} must be divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.num_layers < 1 {
            return Err(Error::config("num_layers must be >= 1"));
        }
        if self.patch_size < 1 || !self.patch_size.is_power_of_two() {
            return Err(Error::config("patch_size must be a power of two >= 1"));
        }
        if self.stem_channels.is_empty() {
            return Err(Error::config("stem_channels must be nonempty"));
        }
        let stride = self.token_stride();
        if self.image_size == 0 || self.image_size % stride != 0 {
            return Err(Error::config(format!(
                "image_size {} must be divisible by the token stride {stride}",
                self.image_size
            )));
        }
        if self.out_channels != 1 {
            return Err(Error::config("out_channels must be 1"));
        }
        Ok(())
    }

    /// Total downsampling factor between input pixels and tokens.
    pub fn token_stride(&self) -> usize {
        (1usize << self.stem_channels.len()) * self.patch_size
    }

    fn token_grid(&self) -> (usize, usize) {
        let g = self.image_size / self.token_stride();
        (g, g)
    }

    /// Decoder stage widths, finest last. Stages that upsample past the stem
    /// skips reuse the first stem width.
    fn decoder_plan(&self) -> Vec<(Option<usize>, usize)> {
        // (skip stage index, out width) per 2x upsample, starting from tokens
        let s = self.stem_channels.len();
        let ups = s + self.patch_size.trailing_zeros() as usize;
        let mut plan = Vec::new();
        for i in 0..ups {
            // stride after this upsample is 2^(ups - 1 - i); stem stage k
            // (0-based) emits its skip at stride 2^(k + 1)
            let stride_pow = ups - 1 - i;
            let skip = (stride_pow >= 1 && stride_pow <= s).then(|| stride_pow - 1);
            let width = match skip {
                Some(k) => self.stem_channels[k],
                None => self.stem_channels[0],
            };
            plan.push((skip, width));
        }
        plan
    }
}

struct TransDecoderStage<F> {
    block: DoubleConv<F>,
    skip: Option<usize>,
    in_main: usize,
}

/// The full hybrid model.
pub struct TransUNet<F> {
    stem: CnnStem<F>,
    embed: PatchEmbed<F>,
    encoder: TransformerEncoder<F>,
    decoder: Vec<TransDecoderStage<F>>,
    head: Conv2d<F>,
    config: TransUNetConfig,
    head_out: Option<Array4<F>>,
    num_skips: usize,
}

impl<F: Real> TransUNet<F> {
    pub fn new(config: TransUNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = CnnStem::new(config.in_channels, &config.stem_channels, &mut rng);
        let embed = PatchEmbed::new(
            *config.stem_channels.last().unwrap(),
            config.patch_size,
            config.token_grid(),
            config.hidden_dim,
            &mut rng,
        );
        let encoder = TransformerEncoder::new(
            config.num_layers,
            config.hidden_dim,
            config.num_heads,
            config.mlp_dim,
            &mut rng,
        )?;
        let mut decoder = Vec::new();
        let mut carry = config.hidden_dim;
        for (skip, width) in config.decoder_plan() {
            let skip_ch = skip.map(|k| config.stem_channels[k]).unwrap_or(0);
            decoder.push(TransDecoderStage {
                block: DoubleConv::new(carry + skip_ch, width, &mut rng),
                skip,
                in_main: carry,
            });
            carry = width;
        }
        let head = Conv2d::new(carry, 1, 1, 0, 1, true, &mut rng);
        let num_skips = config.stem_channels.len();
        Ok(TransUNet {
            stem,
            embed,
            encoder,
            decoder,
            head,
            config,
            head_out: None,
            num_skips,
        })
    }

    pub fn config(&self) -> &TransUNetConfig {
        &self.config
    }

    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<Array4<F>> {
        let (skips, plane) = self.stem.forward(x, mode)?;
        let seq = self.embed.forward(&plane, mode)?;
        let tokens = self.encoder.forward(&seq.tokens, mode)?;
        let (hp, wp) = seq.grid;

        // tokens back onto the spatial grid: (B, D, hp, wp)
        let (b, n, d) = tokens.dim();
        debug_assert_eq!(n, hp * wp);
        let mut cur = Array4::<F>::zeros((b, d, hp, wp));
        for bi in 0..b {
            for t in 0..n {
                for di in 0..d {
                    cur[[bi, di, t / wp, t % wp]] = tokens[[bi, t, di]];
                }
            }
        }

        for stage in &mut self.decoder {
            let up = Upsample2::forward(&cur);
            let cat = match stage.skip {
                Some(k) => ndarray::concatenate(Axis(1), &[up.view(), skips[k].view()])
                    .map_err(|e| Error::shape(format!("decoder concat: {e}")))?,
                None => up,
            };
            cur = stage.block.forward(&cat, mode)?;
        }
        let prob = sigmoid_forward(&self.head.forward(&cur, mode)?);
        if mode.is_train() {
            self.head_out = Some(prob.clone());
        }
        Ok(prob)
    }

    pub fn backward(&mut self, grad: &Array4<F>) -> Array4<F> {
        let prob = self.head_out.as_ref().expect("backward without forward");
        let mut cur = self.head.backward(&sigmoid_backward(prob, grad));

        let mut skip_grads: Vec<Option<Array4<F>>> = (0..self.num_skips).map(|_| None).collect();
        for stage in self.decoder.iter_mut().rev() {
            let dcat = stage.block.backward(&cur);
            let dup = match stage.skip {
                Some(k) => {
                    let dmain = dcat.slice(ndarray::s![.., ..stage.in_main, .., ..]).to_owned();
                    let dskip = dcat.slice(ndarray::s![.., stage.in_main.., .., ..]).to_owned();
                    let slot = &mut skip_grads[k];
                    *slot = Some(match slot.take() {
                        Some(acc) => acc + &dskip,
                        None => dskip,
                    });
                    dmain
                }
                None => dcat,
            };
            cur = Upsample2::backward(&dup);
        }

        // grid back to token sequence
        let (b, d, hp, wp) = cur.dim();
        let mut dtokens = Array3::<F>::zeros((b, hp * wp, d));
        for bi in 0..b {
            for t in 0..hp * wp {
                for di in 0..d {
                    dtokens[[bi, t, di]] = cur[[bi, di, t / wp, t % wp]];
                }
            }
        }
        let dtokens = self.encoder.backward(&dtokens);
        let dplane = self.embed.backward(&dtokens);
        self.stem.backward(&dplane, skip_grads)
    }
}

impl<F: Real> HasParams<F> for TransUNet<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.stem.visit(&join_name(prefix, "stem"), f);
        self.embed.visit(&join_name(prefix, "embed"), f);
        self.encoder.visit(&join_name(prefix, "encoder"), f);
        for (i, s) in self.decoder.iter().enumerate() {
            s.block.visit(&join_name(prefix, &format!("dec{i}")), f);
        }
        self.head.visit(&join_name(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.stem.visit_mut(&join_name(prefix, "stem"), f);
        self.embed.visit_mut(&join_name(prefix, "embed"), f);
        self.encoder.visit_mut(&join_name(prefix, "encoder"), f);
        for (i, s) in self.decoder.iter_mut().enumerate() {
            s.block.visit_mut(&join_name(prefix, &format!("dec{i}")), f);
        }
        self.head.visit_mut(&join_name(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn3(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn(shape, || f64::std_normal(&mut rng))
    }

    #[test]
    fn patch_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plane = Array4::from_shape_simple_fn((2, 3, 8, 8), || f64::std_normal(&mut rng));
        let patches = extract_patches(&plane, 2).unwrap();
        assert_eq!(patches.dim(), (2, 16, 12));
        let back = fold_patches(&patches, (4, 4), 3, 2);
        assert_eq!(plane, back);
    }

    #[test]
    fn patch_counts_follow_the_formula() {
        // N = H*W / P^2
        let plane = Array4::<f64>::zeros((1, 1, 256, 256));
        assert_eq!(extract_patches(&plane, 16).unwrap().dim().1, 256);
        let plane = Array4::<f64>::zeros((1, 1, 16, 16));
        assert_eq!(extract_patches(&plane, 16).unwrap().dim().1, 1);
        let plane = Array4::<f64>::zeros((1, 1, 17, 17));
        assert!(extract_patches(&plane, 16).is_err());
    }

    #[test]
    fn single_token_attention_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mha = MultiHeadAttention::<f64>::new(8, 2, &mut rng).unwrap();
        let tokens = randn3((1, 1, 8), 2);
        let (_, attn) = mha.forward(&tokens, Mode::Eval).unwrap();
        for hi in 0..2 {
            assert_eq!(attn[[0, hi, 0, 0]], 1.0);
        }
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mha = MultiHeadAttention::<f64>::new(8, 2, &mut rng).unwrap();
        let row = randn3((1, 1, 8), 4);
        let mut tokens = Array3::<f64>::zeros((1, 5, 8));
        for t in 0..5 {
            for d in 0..8 {
                tokens[[0, t, d]] = row[[0, 0, d]];
            }
        }
        let (_, attn) = mha.forward(&tokens, Mode::Eval).unwrap();
        for hi in 0..2 {
            for i in 0..5 {
                for j in 0..5 {
                    assert!((attn[[0, hi, i, j]] - 0.2).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mha = MultiHeadAttention::<f64>::new(12, 3, &mut rng).unwrap();
        let tokens = randn3((2, 7, 12), 6);
        let (out, attn) = mha.forward(&tokens, Mode::Eval).unwrap();
        assert_eq!(out.dim(), (2, 7, 12));
        for bi in 0..2 {
            for hi in 0..3 {
                for i in 0..7 {
                    let s: f64 = (0..7).map(|j| attn[[bi, hi, i, j]]).sum();
                    assert!((s - 1.0).abs() < 1e-6);
                    assert!((0..7).all(|j| attn[[bi, hi, i, j]] >= 0.0));
                }
            }
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(MultiHeadAttention::<f64>::new(10, 3, &mut rng).is_err());
    }

    #[test]
    fn empty_encoder_is_identity() {
        let mut enc = TransformerEncoder::<f64> { blocks: vec![] };
        let tokens = randn3((1, 4, 8), 8);
        let out = enc.forward(&tokens, Mode::Eval).unwrap();
        assert_eq!(out, tokens);
    }

    #[test]
    fn zeroed_projections_make_block_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut block = EncoderBlock::<f64>::new(8, 2, 16, &mut rng).unwrap();
        block.attn.wo.weight.value.fill(0.0);
        block.attn.wo.bias.value.fill(0.0);
        block.fc2.weight.value.fill(0.0);
        block.fc2.bias.value.fill(0.0);
        let tokens = randn3((1, 4, 8), 10);
        let out = block.forward(&tokens, Mode::Eval).unwrap();
        for (a, e) in out.iter().zip(tokens.iter()) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn encoder_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut enc = TransformerEncoder::<f64>::new(4, 8, 2, 16, &mut rng).unwrap();
        let tokens = randn3((2, 6, 8), 12);
        let out = enc.forward(&tokens, Mode::Eval).unwrap();
        assert_eq!(out.dim(), (2, 6, 8));
    }

    #[test]
    fn desk_forward_shape_and_range() {
        let mut net = TransUNet::<f32>::new(TransUNetConfig::desk(), 0).unwrap();
        let x = Array4::<f32>::from_elem((1, 3, 64, 64), 0.4);
        let y = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.dim(), (1, 1, 64, 64));
        assert!(y.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn stem_skip_resolutions_halve() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut stem = CnnStem::<f32>::new(3, &[4, 8, 16], &mut rng);
        let x = Array4::<f32>::zeros((1, 3, 64, 64));
        let (skips, plane) = stem.forward(&x, Mode::Eval).unwrap();
        assert_eq!(skips[0].dim(), (1, 4, 32, 32));
        assert_eq!(skips[1].dim(), (1, 8, 16, 16));
        assert_eq!(skips[2].dim(), (1, 16, 8, 8));
        assert_eq!(plane.dim(), (1, 16, 8, 8));

        let bad = Array4::<f32>::zeros((1, 3, 60, 60));
        assert!(stem.forward(&bad, Mode::Eval).is_err());
    }
}
