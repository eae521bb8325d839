//! Generator `G(I₀, z | w₀, wₜ)` and two-headed discriminator
//! `D(I | I₀, w₀, wₜ)`, both spectrally normalized U-Nets built from
//! Conv-BN-ReLU stages.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::descriptor::{WeatherDescriptor, DESCRIPTOR_DIM};
use crate::error::{Error, Result};
use crate::nn::conv::{ConvCache, ConvTransposeCache};
use crate::nn::dense::DenseCache;
use crate::nn::norm::BatchNormCache;
use crate::nn::{
    concat_channels, relu, relu_backward, sigmoid, split_channels, BatchNorm2d, Conv2d, ConvTranspose2d, Dense,
    Gradients, Mode, SpectralKernel, TensorStore,
};

/// Channels contributed by the tiled `(w₀, wₜ)` pair.
pub const CONDITION_CHANNELS: usize = 2 * DESCRIPTOR_DIM;
pub const IMAGE_CHANNELS: usize = 3;
/// `I (3) ‖ I₀ (3) ‖ tiled (w₀, wₜ) (62)`.
pub const DISCRIMINATOR_INPUT_CHANNELS: usize = 2 * IMAGE_CHANNELS + CONDITION_CHANNELS;

const DOWN_KERNEL: usize = 4;
const BLOCK_KERNEL: usize = 3;

/// Widths of the pre-processing block (index 0) and encoder stages 1..=S.
/// Each encoder stage doubles the depth except the last one.
fn stage_widths(stages: usize, base: usize) -> Vec<usize> {
    let mut widths = vec![(base / 2).max(1)];
    for s in 1..=stages {
        let w = if s == stages && stages > 1 {
            widths[s - 1]
        } else {
            base << (s - 1)
        };
        widths.push(w);
    }
    widths
}

fn check_geometry(stages: usize, base: usize, h: usize, w: usize) -> Result<()> {
    if stages == 0 || base == 0 {
        return Err(Error::Config("stages and base_channels must be positive".into()));
    }
    let div = 1usize << stages;
    if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
        return Err(Error::Config(format!(
            "input {h}×{w} is not divisible by 2^{stages}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub stages: usize,
    pub base_channels: usize,
    pub latent_dim: usize,
    pub latent_channels: usize,
    pub input_h: usize,
    pub input_w: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            stages: 5,
            base_channels: 64,
            latent_dim: 100,
            latent_channels: 128,
            input_h: 64,
            input_w: 128,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        check_geometry(self.stages, self.base_channels, self.input_h, self.input_w)?;
        if self.latent_dim == 0 || self.latent_channels == 0 {
            return Err(Error::Config("latent_dim and latent_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn widths(&self) -> Vec<usize> {
        stage_widths(self.stages, self.base_channels)
    }

    /// Spatial size of the innermost stage, where the latent tensor joins.
    pub fn bottleneck(&self) -> (usize, usize) {
        (self.input_h >> self.stages, self.input_w >> self.stages)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub stages: usize,
    pub base_channels: usize,
    pub input_h: usize,
    pub input_w: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            stages: 5,
            base_channels: 64,
            input_h: 64,
            input_w: 128,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        check_geometry(self.stages, self.base_channels, self.input_h, self.input_w)
    }

    pub fn widths(&self) -> Vec<usize> {
        stage_widths(self.stages, self.base_channels)
    }

    pub fn patch_grid(&self) -> (usize, usize) {
        (self.input_h >> self.stages, self.input_w >> self.stages)
    }
}

/// Latent sampling scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub dim: usize,
    pub sigma: f64,
}

impl LatentSpec {
    pub fn new(dim: usize, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidArgument(format!("sigma must be finite and ≥ 0, got {sigma}")));
        }
        Ok(Self { dim, sigma })
    }

    /// Draws `n` vectors from `N(0, σ²)`. With `σ = 0` the result is exactly zero.
    pub fn sample<R: rand::Rng>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, self.dim), || {
            let x: f64 = rng.sample(rand_distr::StandardNormal);
            if self.sigma == 0.0 {
                0.0
            } else {
                self.sigma * x
            }
        })
    }
}

#[derive(Debug, Clone)]
enum ConvLayer {
    Conv(Conv2d),
    Transposed(ConvTranspose2d),
}

#[derive(Debug, Clone)]
enum ConvLayerCache {
    Conv(ConvCache),
    Transposed(ConvTransposeCache),
}

impl ConvLayer {
    fn kernel(&self) -> &SpectralKernel {
        match self {
            ConvLayer::Conv(c) => &c.kernel,
            ConvLayer::Transposed(c) => &c.kernel,
        }
    }
}

/// Conv (or transposed conv) → batch norm → ReLU.
#[derive(Debug, Clone)]
struct ConvBnRelu {
    conv: ConvLayer,
    bn: BatchNorm2d,
}

#[derive(Debug, Clone)]
struct BlockCache {
    conv: ConvLayerCache,
    bn: BatchNormCache,
    out: Array4<f64>,
}

enum BlockKind {
    Same,
    Down,
    Up,
}

impl ConvBnRelu {
    fn init(
        name: &str,
        kind: BlockKind,
        in_ch: usize,
        out_ch: usize,
        params: &mut TensorStore,
        buffers: &mut TensorStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv = match kind {
            BlockKind::Same => ConvLayer::Conv(Conv2d {
                kernel: SpectralKernel::init(&format!("{name}.conv"), out_ch, in_ch, BLOCK_KERNEL, params, buffers, rng),
                stride: 1,
                pad: 1,
            }),
            BlockKind::Down => ConvLayer::Conv(Conv2d {
                kernel: SpectralKernel::init(&format!("{name}.conv"), out_ch, in_ch, DOWN_KERNEL, params, buffers, rng),
                stride: 2,
                pad: 1,
            }),
            BlockKind::Up => ConvLayer::Transposed(ConvTranspose2d {
                kernel: SpectralKernel::init(&format!("{name}.convt"), out_ch, in_ch, DOWN_KERNEL, params, buffers, rng),
                stride: 2,
                pad: 1,
            }),
        };
        let bn = BatchNorm2d::init(&format!("{name}.bn"), out_ch, params, buffers);
        Self { conv, bn }
    }

    fn forward(&self, x: &Array4<f64>, mode: Mode, params: &TensorStore, buffers: &TensorStore) -> (Array4<f64>, BlockCache) {
        let (y, conv) = match &self.conv {
            ConvLayer::Conv(c) => {
                let (y, cache) = c.forward(x, params, buffers);
                (y, ConvLayerCache::Conv(cache))
            }
            ConvLayer::Transposed(c) => {
                let (y, cache) = c.forward(x, params, buffers);
                (y, ConvLayerCache::Transposed(cache))
            }
        };
        let (y, bn) = self.bn.forward(&y, mode, params, buffers);
        let out = relu(&y);
        (out.clone(), BlockCache { conv, bn, out })
    }

    fn backward(&self, cache: &BlockCache, grad: &Array4<f64>, grads: &mut Gradients) -> Array4<f64> {
        let g = relu_backward(&cache.out, grad);
        let g = self.bn.backward(&cache.bn, &g, grads);
        match (&self.conv, &cache.conv) {
            (ConvLayer::Conv(c), ConvLayerCache::Conv(cc)) => c.backward(cc, &g, grads),
            (ConvLayer::Transposed(c), ConvLayerCache::Transposed(cc)) => c.backward(cc, &g, grads),
            _ => unreachable!("cache kind matches layer kind"),
        }
    }
}

/// Concatenates `w₀ ‖ wₜ` into a 62-element conditioning vector.
pub fn condition_vector(w0: &WeatherDescriptor, wt: &WeatherDescriptor) -> Array1<f64> {
    w0.vector.iter().chain(wt.vector.iter()).copied().collect()
}

/// Tiles `(N, C)` conditioning vectors into constant `(N, C, H, W)` planes.
pub fn tile_condition(cond: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, c) = cond.dim();
    Array4::from_shape_fn((n, c, h, w), |(b, k, _, _)| cond[[b, k]])
}

/// Discriminator input stack `I ‖ I₀ ‖ tiled(w₀, wₜ)`.
pub fn discriminator_stack(image: &Array4<f64>, i0: &Array4<f64>, cond: &Array2<f64>) -> Array4<f64> {
    let (_, _, h, w) = image.dim();
    concat_channels(&[image, i0, &tile_condition(cond, h, w)])
}

fn conv1x1(name: &str, in_ch: usize, out_ch: usize, params: &mut TensorStore, buffers: &mut TensorStore, rng: &mut ChaCha8Rng) -> Conv2d {
    Conv2d {
        kernel: SpectralKernel::init(name, out_ch, in_ch, 1, params, buffers, rng),
        stride: 1,
        pad: 0,
    }
}

fn all_kernels<'a>(
    blocks: impl Iterator<Item = &'a ConvBnRelu>,
    extra: impl Iterator<Item = &'a Conv2d>,
) -> Vec<SpectralKernel> {
    blocks
        .map(|b| b.conv.kernel().clone())
        .chain(extra.map(|c| c.kernel.clone()))
        .collect()
}

/// Inputs of one generator call.
#[derive(Debug, Clone)]
pub struct GeneratorInput {
    /// `(N, 3, H, W)`
    pub image: Array4<f64>,
    /// `(N, 62)`
    pub condition: Array2<f64>,
    /// `(N, latent_dim)`
    pub z: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: TensorStore,
    pub buffers: TensorStore,
    pre: ConvBnRelu,
    encoder: Vec<ConvBnRelu>,
    latent: Dense,
    /// `decoder[k]` produces level `k` (so `decoder[S-1]` is innermost).
    decoder: Vec<ConvBnRelu>,
    post: ConvBnRelu,
    head: Conv2d,
}

#[derive(Debug, Clone)]
pub struct GeneratorCache {
    pre: BlockCache,
    encoder: Vec<BlockCache>,
    latent: DenseCache,
    decoder: Vec<BlockCache>,
    post: BlockCache,
    head: ConvCache,
    output: Array4<f64>,
}

/// Gradients w.r.t. generator inputs, plus the gradient reaching each
/// encoder level through its skip edge alone.
#[derive(Debug, Clone)]
pub struct GeneratorInputGrads {
    pub image: Array4<f64>,
    pub z: Array2<f64>,
    pub skip: Vec<Array4<f64>>,
}

impl Generator {
    /// Deterministic initialization from `seed`.
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = TensorStore::new();
        let mut buffers = TensorStore::new();
        let widths = config.widths();
        let s = config.stages;
        let pre = ConvBnRelu::init("g.pre", BlockKind::Same, IMAGE_CHANNELS + CONDITION_CHANNELS, widths[0], &mut params, &mut buffers, &mut rng);
        let encoder = (1..=s)
            .map(|i| ConvBnRelu::init(&format!("g.enc{i}"), BlockKind::Down, widths[i - 1], widths[i], &mut params, &mut buffers, &mut rng))
            .collect();
        let (bh, bw) = config.bottleneck();
        let latent = Dense::init("g.latent", config.latent_dim, config.latent_channels * bh * bw, &mut params, &mut rng);
        let decoder = (0..s)
            .map(|k| {
                let in_ch = if k == s - 1 {
                    widths[s] + config.latent_channels
                } else {
                    2 * widths[k + 1]
                };
                ConvBnRelu::init(&format!("g.dec{k}"), BlockKind::Up, in_ch, widths[k], &mut params, &mut buffers, &mut rng)
            })
            .collect();
        let post = ConvBnRelu::init("g.post", BlockKind::Same, 2 * widths[0], widths[0], &mut params, &mut buffers, &mut rng);
        let head = conv1x1("g.head", widths[0], IMAGE_CHANNELS, &mut params, &mut buffers, &mut rng);
        Ok(Self {
            config,
            params,
            buffers,
            pre,
            encoder,
            latent,
            decoder,
            post,
            head,
        })
    }

    fn kernels(&self) -> Vec<SpectralKernel> {
        all_kernels(
            std::iter::once(&self.pre)
                .chain(&self.encoder)
                .chain(&self.decoder)
                .chain(std::iter::once(&self.post)),
            std::iter::once(&self.head),
        )
    }

    fn batch_norms(&self) -> Vec<&BatchNorm2d> {
        std::iter::once(&self.pre)
            .chain(&self.encoder)
            .chain(&self.decoder)
            .chain(std::iter::once(&self.post))
            .map(|b| &b.bn)
            .collect()
    }

    /// Advances every spectral-norm power iteration by one step.
    pub fn power_iterate(&mut self) {
        for k in self.kernels() {
            k.power_iterate(&self.params, &mut self.buffers);
        }
    }

    /// Names of the spectrally normalized weights, for inspection.
    pub fn spectral_weights(&self) -> Vec<(SpectralKernel, String)> {
        self.kernels()
            .into_iter()
            .map(|k| {
                let name = self.params.name(k.weight.index()).to_string();
                (k, name)
            })
            .collect()
    }

    fn check_input(&self, input: &GeneratorInput) -> Result<()> {
        let (n, c, h, w) = input.image.dim();
        if c != IMAGE_CHANNELS || h != self.config.input_h || w != self.config.input_w {
            return Err(Error::Shape(format!(
                "generator expects N×3×{}×{}, got {n}×{c}×{h}×{w}",
                self.config.input_h, self.config.input_w
            )));
        }
        if input.condition.dim() != (n, CONDITION_CHANNELS) {
            return Err(Error::Shape(format!("condition shape {:?}, expected ({n}, {CONDITION_CHANNELS})", input.condition.dim())));
        }
        if input.z.dim() != (n, self.config.latent_dim) {
            return Err(Error::Shape(format!("latent shape {:?}, expected ({n}, {})", input.z.dim(), self.config.latent_dim)));
        }
        Ok(())
    }

    pub fn forward(&self, input: &GeneratorInput, mode: Mode) -> Result<(Array4<f64>, GeneratorCache)> {
        self.check_input(input)?;
        let (n, _, h, w) = input.image.dim();
        let (p, b) = (&self.params, &self.buffers);
        let x = concat_channels(&[&input.image, &tile_condition(&input.condition, h, w)]);
        let (a0, pre) = self.pre.forward(&x, mode, p, b);
        let mut acts = vec![a0];
        let mut encoder = Vec::with_capacity(self.encoder.len());
        for stage in &self.encoder {
            let (a, c) = stage.forward(acts.last().expect("nonempty"), mode, p, b);
            acts.push(a);
            encoder.push(c);
        }
        let (zf, latent) = self.latent.forward(&input.z, p);
        let (bh, bw) = self.config.bottleneck();
        let zf = zf
            .into_shape_with_order((n, self.config.latent_channels, bh, bw))
            .expect("latent reshape");
        let s = self.config.stages;
        let mut x = concat_channels(&[&acts[s], &zf]);
        let mut decoder: Vec<Option<BlockCache>> = vec![None; s];
        for k in (0..s).rev() {
            let (y, c) = self.decoder[k].forward(&x, mode, p, b);
            decoder[k] = Some(c);
            x = concat_channels(&[&y, &acts[k]]);
        }
        let (pp, post) = self.post.forward(&x, mode, p, b);
        let (logits, head) = self.head.forward(&pp, p, b);
        let output = logits.mapv(f64::tanh);
        Ok((
            output.clone(),
            GeneratorCache {
                pre,
                encoder,
                latent,
                decoder: decoder.into_iter().map(|c| c.expect("filled")).collect(),
                post,
                head,
                output,
            },
        ))
    }

    pub fn backward(&self, cache: &GeneratorCache, grad_out: &Array4<f64>, grads: &mut Gradients) -> GeneratorInputGrads {
        let widths = self.config.widths();
        let s = self.config.stages;
        let g = grad_out * &cache.output.mapv(|y| 1.0 - y * y);
        let g = self.head.backward(&cache.head, &g, grads);
        let mut gx = self.post.backward(&cache.post, &g, grads);
        let mut g_acts: Vec<Option<Array4<f64>>> = vec![None; s + 1];
        let mut skip = Vec::with_capacity(s + 1);
        for k in 0..s {
            let (gy, gskip) = split_channels(&gx, widths[k]);
            skip.push(gskip.clone());
            g_acts[k] = Some(gskip);
            gx = self.decoder[k].backward(&cache.decoder[k], &gy, grads);
        }
        let (g_as, g_zf) = split_channels(&gx, widths[s]);
        skip.push(g_as.clone());
        let n = g_zf.dim().0;
        let g_zf = g_zf
            .into_shape_with_order((n, g_zf_len(&self.config)))
            .expect("latent reshape");
        let g_z = self.latent.backward(&cache.latent, &g_zf, grads);
        let mut g = g_as;
        for i in (1..=s).rev() {
            let g_prev = self.encoder[i - 1].backward(&cache.encoder[i - 1], &g, grads);
            g = g_prev + g_acts[i - 1].take().expect("skip gradient");
        }
        let g_in = self.pre.backward(&cache.pre, &g, grads);
        let (g_image, _) = split_channels(&g_in, IMAGE_CHANNELS);
        GeneratorInputGrads {
            image: g_image,
            z: g_z,
            skip,
        }
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn commit_batch_stats(&mut self, cache: &GeneratorCache) {
        let caches = std::iter::once(&cache.pre)
            .chain(&cache.encoder)
            .chain(&cache.decoder)
            .chain(std::iter::once(&cache.post));
        let bns: Vec<BatchNorm2d> = self.batch_norms().into_iter().cloned().collect();
        for (bn, c) in bns.iter().zip(caches) {
            bn.commit(&c.bn, &mut self.buffers);
        }
    }

    /// Inference for a single example.
    pub fn generate(
        &self,
        i0: &crate::archive::ImageTensor,
        w0: &WeatherDescriptor,
        wt: &WeatherDescriptor,
        z: &Array1<f64>,
    ) -> Result<crate::archive::ImageTensor> {
        let input = GeneratorInput {
            image: i0.to_nchw(),
            condition: condition_vector(w0, wt).insert_axis(Axis(0)),
            z: z.clone().insert_axis(Axis(0)),
        };
        let (out, _) = self.forward(&input, Mode::Eval)?;
        Ok(crate::archive::ImageTensor::from_nchw(&out, 0))
    }

    /// Zeroes the latent projection so the output ignores `z`.
    pub fn disable_latent(&mut self) {
        self.params.get_mut(self.latent.weight).fill(0.0);
        self.params.get_mut(self.latent.bias).fill(0.0);
    }
}

fn g_zf_len(c: &GeneratorConfig) -> usize {
    let (bh, bw) = c.bottleneck();
    c.latent_channels * bh * bw
}

/// Patch-level and pixel-level probabilities, `(N, 1, h, w)` each.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    pub patch: Array4<f64>,
    pub pixel: Array4<f64>,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: TensorStore,
    pub buffers: TensorStore,
    pre: ConvBnRelu,
    encoder: Vec<ConvBnRelu>,
    patch_head: Conv2d,
    decoder: Vec<ConvBnRelu>,
    post: ConvBnRelu,
    pixel_head: Conv2d,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorCache {
    pre: BlockCache,
    encoder: Vec<BlockCache>,
    patch_head: ConvCache,
    decoder: Vec<BlockCache>,
    post: BlockCache,
    pixel_head: ConvCache,
    output: DiscriminatorOutput,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = TensorStore::new();
        let mut buffers = TensorStore::new();
        let widths = config.widths();
        let s = config.stages;
        let pre = ConvBnRelu::init("d.pre", BlockKind::Same, DISCRIMINATOR_INPUT_CHANNELS, widths[0], &mut params, &mut buffers, &mut rng);
        let encoder = (1..=s)
            .map(|i| ConvBnRelu::init(&format!("d.enc{i}"), BlockKind::Down, widths[i - 1], widths[i], &mut params, &mut buffers, &mut rng))
            .collect();
        let patch_head = conv1x1("d.patch_head", widths[s], 1, &mut params, &mut buffers, &mut rng);
        let decoder = (0..s)
            .map(|k| {
                let in_ch = if k == s - 1 { widths[s] } else { 2 * widths[k + 1] };
                ConvBnRelu::init(&format!("d.dec{k}"), BlockKind::Up, in_ch, widths[k], &mut params, &mut buffers, &mut rng)
            })
            .collect();
        let post = ConvBnRelu::init("d.post", BlockKind::Same, 2 * widths[0], widths[0], &mut params, &mut buffers, &mut rng);
        let pixel_head = conv1x1("d.pixel_head", widths[0], 1, &mut params, &mut buffers, &mut rng);
        Ok(Self {
            config,
            params,
            buffers,
            pre,
            encoder,
            patch_head,
            decoder,
            post,
            pixel_head,
        })
    }

    fn kernels(&self) -> Vec<SpectralKernel> {
        all_kernels(
            std::iter::once(&self.pre)
                .chain(&self.encoder)
                .chain(&self.decoder)
                .chain(std::iter::once(&self.post)),
            [&self.patch_head, &self.pixel_head].into_iter(),
        )
    }

    pub fn power_iterate(&mut self) {
        for k in self.kernels() {
            k.power_iterate(&self.params, &mut self.buffers);
        }
    }

    pub fn spectral_weights(&self) -> Vec<(SpectralKernel, String)> {
        self.kernels()
            .into_iter()
            .map(|k| {
                let name = self.params.name(k.weight.index()).to_string();
                (k, name)
            })
            .collect()
    }

    /// Parameter names belonging to the decoder path (decoder stages, post
    /// block and pixel head).
    pub fn decoder_param_names(&self) -> Vec<String> {
        self.params
            .names()
            .iter()
            .filter(|n| n.starts_with("d.dec") || n.starts_with("d.post") || n.starts_with("d.pixel_head"))
            .cloned()
            .collect()
    }

    pub fn forward(&self, stack: &Array4<f64>, mode: Mode) -> Result<(DiscriminatorOutput, DiscriminatorCache)> {
        let (n, c, h, w) = stack.dim();
        if c != DISCRIMINATOR_INPUT_CHANNELS || h != self.config.input_h || w != self.config.input_w {
            return Err(Error::Shape(format!(
                "discriminator expects N×{DISCRIMINATOR_INPUT_CHANNELS}×{}×{}, got {n}×{c}×{h}×{w}",
                self.config.input_h, self.config.input_w
            )));
        }
        let (p, b) = (&self.params, &self.buffers);
        let s = self.config.stages;
        let (a0, pre) = self.pre.forward(stack, mode, p, b);
        let mut acts = vec![a0];
        let mut encoder = Vec::with_capacity(s);
        for stage in &self.encoder {
            let (a, c) = stage.forward(acts.last().expect("nonempty"), mode, p, b);
            acts.push(a);
            encoder.push(c);
        }
        let (patch_logits, patch_head) = self.patch_head.forward(&acts[s], p, b);
        let mut x = acts[s].clone();
        let mut decoder: Vec<Option<BlockCache>> = vec![None; s];
        for k in (0..s).rev() {
            let (y, c) = self.decoder[k].forward(&x, mode, p, b);
            decoder[k] = Some(c);
            x = concat_channels(&[&y, &acts[k]]);
        }
        let (pp, post) = self.post.forward(&x, mode, p, b);
        let (pixel_logits, pixel_head) = self.pixel_head.forward(&pp, p, b);
        let output = DiscriminatorOutput {
            patch: patch_logits.mapv(sigmoid),
            pixel: pixel_logits.mapv(sigmoid),
        };
        Ok((
            output.clone(),
            DiscriminatorCache {
                pre,
                encoder,
                patch_head,
                decoder: decoder.into_iter().map(|c| c.expect("filled")).collect(),
                post,
                pixel_head,
                output,
            },
        ))
    }

    /// Backpropagates gradients w.r.t. the two probability maps; returns the
    /// gradient w.r.t. the input stack.
    pub fn backward(
        &self,
        cache: &DiscriminatorCache,
        grad_patch: &Array4<f64>,
        grad_pixel: &Array4<f64>,
        grads: &mut Gradients,
    ) -> Array4<f64> {
        let widths = self.config.widths();
        let s = self.config.stages;
        let sig_grad = |g: &Array4<f64>, p: &Array4<f64>| g * &p.mapv(|p| p * (1.0 - p));
        let g_pixel = sig_grad(grad_pixel, &cache.output.pixel);
        let g = self.pixel_head.backward(&cache.pixel_head, &g_pixel, grads);
        let mut gx = self.post.backward(&cache.post, &g, grads);
        let mut g_acts: Vec<Option<Array4<f64>>> = vec![None; s + 1];
        for k in 0..s {
            let (gy, gskip) = split_channels(&gx, widths[k]);
            g_acts[k] = Some(gskip);
            gx = self.decoder[k].backward(&cache.decoder[k], &gy, grads);
        }
        let g_patch = sig_grad(grad_patch, &cache.output.patch);
        let mut g = gx + self.patch_head.backward(&cache.patch_head, &g_patch, grads);
        for i in (1..=s).rev() {
            let g_prev = self.encoder[i - 1].backward(&cache.encoder[i - 1], &g, grads);
            g = g_prev + g_acts[i - 1].take().expect("skip gradient");
        }
        self.pre.backward(&cache.pre, &g, grads)
    }

    pub fn commit_batch_stats(&mut self, cache: &DiscriminatorCache) {
        let caches = std::iter::once(&cache.pre)
            .chain(&cache.encoder)
            .chain(&cache.decoder)
            .chain(std::iter::once(&cache.post));
        let bns: Vec<BatchNorm2d> = std::iter::once(&self.pre)
            .chain(&self.encoder)
            .chain(&self.decoder)
            .chain(std::iter::once(&self.post))
            .map(|b| b.bn.clone())
            .collect();
        for (bn, c) in bns.iter().zip(caches) {
            bn.commit(&c.bn, &mut self.buffers);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_g() -> GeneratorConfig {
        GeneratorConfig {
            stages: 2,
            base_channels: 4,
            latent_dim: 5,
            latent_channels: 3,
            input_h: 8,
            input_w: 16,
        }
    }

    fn tiny_d() -> DiscriminatorConfig {
        DiscriminatorConfig {
            stages: 2,
            base_channels: 4,
            input_h: 8,
            input_w: 16,
        }
    }

    fn random_input(cfg: &GeneratorConfig, n: usize, seed: u64) -> GeneratorInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GeneratorInput {
            image: Array4::from_shape_simple_fn((n, 3, cfg.input_h, cfg.input_w), || rng.random_range(-1.0..1.0)),
            condition: Array2::from_shape_simple_fn((n, CONDITION_CHANNELS), || rng.random_range(-2.0..2.0)),
            z: Array2::from_shape_simple_fn((n, cfg.latent_dim), || rng.random_range(-1.0..1.0)),
        }
    }

    #[test]
    fn widths_follow_doubling_with_capped_last_stage() {
        assert_eq!(stage_widths(5, 64), vec![32, 64, 128, 256, 512, 512]);
        assert_eq!(stage_widths(1, 8), vec![4, 8]);
        assert_eq!(GeneratorConfig::default().bottleneck(), (2, 4));
    }

    #[test]
    fn geometry_is_validated() {
        let mut c = tiny_g();
        c.input_h = 10;
        assert!(matches!(Generator::new(c, 0), Err(Error::Config(_))));
        let g = Generator::new(tiny_g(), 0).unwrap();
        let mut input = random_input(&tiny_g(), 1, 1);
        input.z = Array2::zeros((1, 4));
        assert!(matches!(g.forward(&input, Mode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn init_is_seeded() {
        let a = Generator::new(tiny_g(), 7).unwrap();
        let b = Generator::new(tiny_g(), 7).unwrap();
        let c = Generator::new(tiny_g(), 8).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.buffers, b.buffers);
        assert_ne!(a.params, c.params);
        for (i, name) in a.params.names().iter().enumerate() {
            if name.ends_with(".beta") {
                assert!(a.params.values()[i].iter().all(|v| *v == 0.0));
            }
            if name.ends_with(".gamma") {
                assert!(a.params.values()[i].iter().all(|v| *v == 1.0));
            }
        }
    }

    #[test]
    fn generator_shapes_and_range() {
        let g = Generator::new(tiny_g(), 1).unwrap();
        let input = random_input(&tiny_g(), 2, 3);
        for mode in [Mode::Train, Mode::Eval] {
            let (out, _) = g.forward(&input, mode).unwrap();
            assert_eq!(out.dim(), (2, 3, 8, 16));
            assert!(out.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn discriminator_shapes_and_batch_equivariance() {
        let d = Discriminator::new(tiny_d(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stack = Array4::from_shape_simple_fn((3, DISCRIMINATOR_INPUT_CHANNELS, 8, 16), || rng.random_range(-1.0..1.0));
        let (out, _) = d.forward(&stack, Mode::Eval).unwrap();
        assert_eq!(out.patch.dim(), (3, 1, 2, 4));
        assert_eq!(out.pixel.dim(), (3, 1, 8, 16));
        assert!(out.patch.iter().chain(out.pixel.iter()).all(|p| *p > 0.0 && *p < 1.0));
        let mut permuted = stack.clone();
        permuted.index_axis_mut(Axis(0), 0).assign(&stack.index_axis(Axis(0), 2));
        permuted.index_axis_mut(Axis(0), 2).assign(&stack.index_axis(Axis(0), 0));
        let (pout, _) = d.forward(&permuted, Mode::Eval).unwrap();
        assert_eq!(pout.patch.index_axis(Axis(0), 0), out.patch.index_axis(Axis(0), 2));
        assert_eq!(pout.pixel.index_axis(Axis(0), 2), out.pixel.index_axis(Axis(0), 0));
    }

    #[test]
    fn patch_head_ignores_decoder() {
        let mut d = Discriminator::new(tiny_d(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let stack = Array4::from_shape_simple_fn((2, DISCRIMINATOR_INPUT_CHANNELS, 8, 16), || rng.random_range(-1.0..1.0));
        let (before, _) = d.forward(&stack, Mode::Train).unwrap();
        let names = d.decoder_param_names();
        assert!(!names.is_empty());
        for i in 0..d.params.len() {
            if names.iter().any(|n| n == d.params.name(i)) {
                d.params.values_mut()[i].fill(0.0);
            }
        }
        let (after, _) = d.forward(&stack, Mode::Train).unwrap();
        assert_eq!(before.patch, after.patch);
        assert_ne!(before.pixel, after.pixel);
    }

    #[test]
    fn skip_edges_carry_gradient() {
        let g = Generator::new(tiny_g(), 4).unwrap();
        let input = random_input(&tiny_g(), 1, 9);
        let (out, cache) = g.forward(&input, Mode::Train).unwrap();
        let mut grads = g.params.zeros_like();
        let gin = g.backward(&cache, &Array4::ones(out.dim()), &mut grads);
        assert!(gin.skip[1].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn latent_can_be_disabled() {
        let mut g = Generator::new(tiny_g(), 4).unwrap();
        g.disable_latent();
        let mut a = random_input(&tiny_g(), 1, 9);
        let (out_a, _) = g.forward(&a, Mode::Eval).unwrap();
        a.z.mapv_inplace(|v| v * 10.0 + 1.0);
        let (out_b, _) = g.forward(&a, Mode::Eval).unwrap();
        assert_eq!(out_a, out_b);
    }
}
