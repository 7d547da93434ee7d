//! Wavelet-domain U-Net generator.
//!
//! ```text
//! stem 3×3 ─► [level 0 res blocks]─skip0─► down ─► [level 1] ─skip1─► down ─► … ─► SE
//!                                                                                 │
//! head 3×3 ◄─ [level 0 res blocks] ◄─ cat(skip0) ◄─ up+3×3 ◄─ … ◄─ cat(skip_{d-1}) ◄─ up+3×3
//! ```
//!
//! Level `l` runs at `1/2^l` of the input resolution with `base·2^l`
//! channels. Downsampling is a stride-2 3×3 convolution; upsampling is
//! nearest-neighbour followed by a 3×3 convolution.

use rand::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use super::blocks::{ResidualBlock, SeBlock};
use crate::error::{Error, Result};
use crate::nn::{
    activation, concat_channels, join, split_channels, upsample_nearest, upsample_nearest_backward, Act,
    Activation, Conv2d, Module, Parameter,
};
use crate::rng::{derive_seed, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const ACT: Activation = Activation::LEAKY;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    /// Side length of the square source image (before any wavelet split).
    pub input_size: usize,
    pub base_channels: usize,
    /// Total residual blocks, split equally between encoder and decoder.
    pub n_res_blocks: usize,
    pub se_reduction: usize,
    /// Number of encoder levels.
    pub depth: usize,
    /// Std-dev of Gaussian noise injected into the bottleneck and every
    /// decoder level during training forwards; 0 disables it.
    pub noise_std: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            input_size: 64,
            base_channels: 16,
            n_res_blocks: 12,
            se_reduction: 4,
            depth: 3,
            noise_std: 0.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 1usize << (self.depth + 1);
        let fail = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return fail("generator depth must be at least 1".into());
        }
        if self.input_size == 0 || self.input_size % unit != 0 {
            return fail(format!("input_size {} must be a positive multiple of 2^(depth+1) = {unit}", self.input_size));
        }
        if self.n_res_blocks % 2 != 0 {
            return fail(format!("n_res_blocks {} must be even", self.n_res_blocks));
        }
        if self.n_res_blocks / 2 < self.depth {
            return fail(format!("n_res_blocks {} leaves a level without a residual block at depth {}", self.n_res_blocks, self.depth));
        }
        if self.base_channels == 0 || self.se_reduction == 0 {
            return fail("base_channels and se_reduction must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail("noise_std must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Residual blocks per level on one side of the U.
    pub fn blocks_per_level(&self) -> Vec<usize> {
        let per_side = self.n_res_blocks / 2;
        (0..self.depth)
            .map(|l| per_side / self.depth + usize::from(l < per_side % self.depth))
            .collect()
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel<T> {
    blocks: Vec<ResidualBlock<T>>,
    down: Conv2d<T>,
    down_act: Act<T>,
}

#[derive(Clone, Debug)]
struct DecoderLevel<T> {
    up: Conv2d<T>,
    up_act: Act<T>,
    blocks: Vec<ResidualBlock<T>>,
}

#[derive(Clone, Debug)]
pub struct Generator<T> {
    cfg: GeneratorConfig,
    io_channels: usize,
    stem: Conv2d<T>,
    stem_act: Act<T>,
    enc: Vec<EncoderLevel<T>>,
    center: SeBlock<T>,
    /// Indexed by level, like `enc`; run in reverse order.
    dec: Vec<DecoderLevel<T>>,
    head: Conv2d<T>,
    noise_rng: Rng,
}

impl<T: Scalar> Generator<T> {
    /// `io_channels` is 4 for packed wavelet bands, 1 for raw images.
    pub fn new(cfg: &GeneratorConfig, io_channels: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if io_channels == 0 {
            return Err(Error::Config("generator needs at least one input channel".into()));
        }
        let c0 = cfg.channels_at(0);
        let stem = Conv2d::new(io_channels, c0, 3, 1, rng);
        let counts = cfg.blocks_per_level();
        let mut enc = Vec::with_capacity(cfg.depth);
        let mut prev = c0;
        for (l, &count) in counts.iter().enumerate() {
            let c = cfg.channels_at(l);
            let blocks = (0..count)
                .map(|i| ResidualBlock::new(if i == 0 { prev } else { c }, c, ACT, rng))
                .collect();
            enc.push(EncoderLevel { blocks, down: Conv2d::new(c, c, 3, 2, rng), down_act: Act::new(ACT) });
            prev = c;
        }
        let center = SeBlock::new(prev, cfg.se_reduction, rng);
        let mut dec = Vec::with_capacity(cfg.depth);
        for (l, &count) in counts.iter().enumerate() {
            let c = cfg.channels_at(l);
            let below = if l + 1 == cfg.depth { cfg.channels_at(l) } else { cfg.channels_at(l + 1) };
            let blocks = (0..count)
                .map(|i| ResidualBlock::new(if i == 0 { 2 * c } else { c }, c, ACT, rng))
                .collect();
            dec.push(DecoderLevel { up: Conv2d::new(below, c, 3, 1, rng), up_act: Act::new(ACT), blocks });
        }
        let head = Conv2d::new(c0, io_channels, 3, 1, rng);
        let noise_rng = Rng::seed_from_u64(derive_seed(rng.next_u64(), "noise"));
        Ok(Generator { cfg: cfg.clone(), io_channels, stem, stem_act: Act::new(ACT), enc, center, dec, head, noise_rng })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn io_channels(&self) -> usize {
        self.io_channels
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4("generator_forward")?;
        if c != self.io_channels {
            return Err(Error::shape("generator_forward", "channel axis", self.io_channels, c));
        }
        let unit = 1usize << self.cfg.depth;
        if h % unit != 0 || w % unit != 0 || h == 0 || w == 0 {
            return Err(Error::shape("generator_forward", "spatial axes", format!("multiples of {unit}"), format!("{h}x{w}")));
        }
        Ok(())
    }

    /// Deterministic forward pass without caching or noise.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = activation(&self.stem.infer(x)?, ACT);
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for level in &self.enc {
            for b in &level.blocks {
                h = b.infer(&h)?;
            }
            skips.push(h.clone());
            h = activation(&level.down.infer(&h)?, ACT);
        }
        h = self.center.infer(&h)?;
        for (level, skip) in self.dec.iter().zip(&skips).rev() {
            h = activation(&level.up.infer(&upsample_nearest(&h, 2)?)?, ACT);
            h = concat_channels(&h, skip)?;
            for b in &level.blocks {
                h = b.infer(&h)?;
            }
        }
        self.head.infer(&h)
    }

    fn add_noise(&mut self, h: &mut Tensor<T>) {
        if self.cfg.noise_std > 0.0 {
            let std = self.cfg.noise_std;
            for v in h.data_mut() {
                let z: f64 = StandardNormal.sample(&mut self.noise_rng);
                *v += T::lit(std * z);
            }
        }
    }

    /// Training forward: caches activations for [`Generator::backward`].
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = self.stem_act.forward(&self.stem.forward(x)?);
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for level in &mut self.enc {
            for b in &mut level.blocks {
                h = b.forward(&h)?;
            }
            skips.push(h.clone());
            h = level.down_act.forward(&level.down.forward(&h)?);
        }
        h = self.center.forward(&h)?;
        self.add_noise(&mut h);
        for l in (0..self.cfg.depth).rev() {
            let level = &mut self.dec[l];
            h = level.up_act.forward(&level.up.forward(&upsample_nearest(&h, 2)?)?);
            h = concat_channels(&h, &skips[l])?;
            for b in &mut level.blocks {
                h = b.forward(&h)?;
            }
            if l > 0 {
                self.add_noise(&mut h);
            }
        }
        self.head.forward(&h)
    }

    /// Back-propagates `dL/d(output)`, accumulating parameter gradients.
    /// Returns `dL/d(input)`.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.head.backward(grad)?;
        let mut skip_grads = vec![None; self.cfg.depth];
        for l in 0..self.cfg.depth {
            let c = self.cfg.channels_at(l);
            let level = &mut self.dec[l];
            for b in level.blocks.iter_mut().rev() {
                g = b.backward(&g)?;
            }
            let (g_up, g_skip) = split_channels(&g, c)?;
            skip_grads[l] = Some(g_skip);
            let g_up = level.up.backward(&level.up_act.backward(&g_up)?)?;
            g = upsample_nearest_backward(&g_up, 2)?;
        }
        g = self.center.backward(&g)?;
        for (l, level) in self.enc.iter_mut().enumerate().rev() {
            g = level.down.backward(&level.down_act.backward(&g)?)?;
            g.add_assign(skip_grads[l].as_ref().expect("decoder level visited"))?;
            for b in level.blocks.iter_mut().rev() {
                g = b.backward(&g)?;
            }
        }
        self.stem.backward(&self.stem_act.backward(&g)?)
    }

    /// Zeroes the upsampling convolutions, cutting the bottleneck path so
    /// the output can only depend on the input through the skips.
    pub fn zero_up_path(&mut self) {
        for level in &mut self.dec {
            level.up.visit_params_mut("", &mut |_, p| p.value.fill(T::zero()));
        }
    }

    /// Zeroes the residual branches of every decoder block, leaving only
    /// their shortcut paths.
    pub fn zero_decoder_branches(&mut self) {
        for level in &mut self.dec {
            for b in &mut level.blocks {
                b.conv1.visit_params_mut("", &mut |_, p| p.value.fill(T::zero()));
                b.conv2.visit_params_mut("", &mut |_, p| p.value.fill(T::zero()));
            }
        }
    }
}

impl<T: Scalar> Module<T> for Generator<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter<T>)) {
        self.stem.visit_params(&join(prefix, "stem"), f);
        for (l, level) in self.enc.iter().enumerate() {
            for (i, b) in level.blocks.iter().enumerate() {
                b.visit_params(&join(prefix, &format!("enc{l}.block{i}")), f);
            }
            level.down.visit_params(&join(prefix, &format!("enc{l}.down")), f);
        }
        self.center.visit_params(&join(prefix, "center"), f);
        for (l, level) in self.dec.iter().enumerate().rev() {
            level.up.visit_params(&join(prefix, &format!("dec{l}.up")), f);
            for (i, b) in level.blocks.iter().enumerate() {
                b.visit_params(&join(prefix, &format!("dec{l}.block{i}")), f);
            }
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter<T>)) {
        self.stem.visit_params_mut(&join(prefix, "stem"), f);
        for (l, level) in self.enc.iter_mut().enumerate() {
            for (i, b) in level.blocks.iter_mut().enumerate() {
                b.visit_params_mut(&join(prefix, &format!("enc{l}.block{i}")), f);
            }
            level.down.visit_params_mut(&join(prefix, &format!("enc{l}.down")), f);
        }
        self.center.visit_params_mut(&join(prefix, "center"), f);
        for (l, level) in self.dec.iter_mut().enumerate().rev() {
            level.up.visit_params_mut(&join(prefix, &format!("dec{l}.up")), f);
            for (i, b) in level.blocks.iter_mut().enumerate() {
                b.visit_params_mut(&join(prefix, &format!("dec{l}.block{i}")), f);
            }
        }
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }
}
