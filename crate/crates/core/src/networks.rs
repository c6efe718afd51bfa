//! Per-scale residual generator and Markovian patch critic.
//!
//! Both nets are stacks of `num_blocks` 3x3 convolutions. The generator
//! zero-pads its input by `num_blocks` pixels per side so output dims equal
//! input dims, ends in a tanh head, and adds the result to the upsampled
//! previous-scale image. The critic uses no padding at all, so each score in
//! its output map is a function of exactly a `(2 num_blocks + 1)^2` patch.
//!
//! Normalization differs on purpose: the generator normalizes per channel
//! over space (stabilizes single-image training), while the critic
//! normalizes across channels at each position, which keeps every score
//! strictly local to its patch and keeps per-input gradient penalties clean.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, CHANNELS};
use crate::tensor::{Tape, Tensor, Var};

pub const LEAKY_SLOPE: f32 = 0.2;
const NORM_EPS: f32 = 1e-5;
const WEIGHT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_blocks: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
    pub min_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { num_blocks: 5, base_channels: 32, kernel_size: 3, min_channels: 32 }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks < 3 {
            return Err(Error::config("num_blocks must be at least 3"));
        }
        if self.base_channels < 8 {
            return Err(Error::config("base_channels must be at least 8"));
        }
        if self.kernel_size != 3 {
            return Err(Error::config("kernel_size is fixed at 3"));
        }
        if self.min_channels < 1 || self.min_channels > self.base_channels {
            return Err(Error::config("min_channels must be in 1..=base_channels"));
        }
        Ok(())
    }

    /// Channel width doubles every four scales, capped at 128.
    pub fn width_for_scale(&self, scale_index: usize) -> usize {
        let grown = self.base_channels << (scale_index / 4).min(8);
        grown.min(128).max(self.min_channels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub conv: ConvParams,
    pub norm: Option<NormParams>,
}

fn init_conv(ci: usize, co: usize, k: usize, rng: &mut ChaCha8Rng) -> ConvParams {
    let n = co * ci * k * k;
    let weight = Tensor::new(
        vec![co, ci, k, k],
        (0..n)
            .map(|_| {
                let g: f64 = rng.sample(StandardNormal);
                (g * WEIGHT_STD) as f32
            })
            .collect(),
    );
    ConvParams { weight, bias: Tensor::zeros(vec![co]) }
}

fn init_norm(c: usize, rng: &mut ChaCha8Rng) -> NormParams {
    let gamma = Tensor::new(
        vec![c],
        (0..c)
            .map(|_| {
                let g: f64 = rng.sample(StandardNormal);
                (1.0 + g * WEIGHT_STD) as f32
            })
            .collect(),
    );
    NormParams { gamma, beta: Tensor::zeros(vec![c]) }
}

fn init_blocks(
    config: &GeneratorConfig,
    scale_index: usize,
    out_channels: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<BlockParams> {
    let width = config.width_for_scale(scale_index);
    let k = config.kernel_size;
    let nb = config.num_blocks;
    (0..nb)
        .map(|i| {
            let ci = if i == 0 { CHANNELS } else { width };
            let co = if i + 1 == nb { out_channels } else { width };
            let conv = init_conv(ci, co, k, rng);
            let norm = (i + 1 != nb).then(|| init_norm(co, rng));
            BlockParams { conv, norm }
        })
        .collect()
}

fn named_block_tensors(blocks: &[BlockParams]) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (i, b) in blocks.iter().enumerate() {
        out.push((format!("b{i}.conv.w"), &b.conv.weight));
        out.push((format!("b{i}.conv.b"), &b.conv.bias));
        if let Some(n) = &b.norm {
            out.push((format!("b{i}.norm.g"), &n.gamma));
            out.push((format!("b{i}.norm.b"), &n.beta));
        }
    }
    out
}

fn named_block_tensors_mut(blocks: &mut [BlockParams]) -> Vec<(String, &mut Tensor)> {
    let mut out = Vec::new();
    for (i, b) in blocks.iter_mut().enumerate() {
        out.push((format!("b{i}.conv.w"), &mut b.conv.weight));
        out.push((format!("b{i}.conv.b"), &mut b.conv.bias));
        if let Some(n) = &mut b.norm {
            out.push((format!("b{i}.norm.g"), &mut n.gamma));
            out.push((format!("b{i}.norm.b"), &mut n.beta));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleGenerator {
    pub config: GeneratorConfig,
    pub scale_index: usize,
    pub blocks: Vec<BlockParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleDiscriminator {
    pub config: GeneratorConfig,
    pub scale_index: usize,
    pub blocks: Vec<BlockParams>,
}

/// Fresh generator parameters: conv weights N(0, 0.02^2), normalization
/// scales N(1, 0.02^2), all biases and shifts zero.
pub fn init_generator(config: &GeneratorConfig, scale_index: usize, seed: u64) -> ScaleGenerator {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = init_blocks(config, scale_index, CHANNELS, &mut rng);
    ScaleGenerator { config: *config, scale_index, blocks }
}

pub fn init_discriminator(
    config: &GeneratorConfig,
    scale_index: usize,
    seed: u64,
) -> ScaleDiscriminator {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = init_blocks(config, scale_index, 1, &mut rng);
    ScaleDiscriminator { config: *config, scale_index, blocks }
}

impl ScaleGenerator {
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        named_block_tensors(&self.blocks)
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        named_block_tensors_mut(&mut self.blocks)
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

impl ScaleDiscriminator {
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        named_block_tensors(&self.blocks)
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        named_block_tensors_mut(&mut self.blocks)
    }

    /// Smallest input dimension the critic accepts: one more pixel than the
    /// shrink of the unpadded conv stack.
    pub fn min_input_dim(&self) -> usize {
        2 * self.config.num_blocks + 1
    }
}

/// A network staged onto a tape: one leaf per parameter tensor.
pub struct StagedNet {
    blocks: Vec<StagedBlock>,
    vars: Vec<(String, Var)>,
    num_blocks: usize,
}

struct StagedBlock {
    weight: Var,
    bias: Var,
    norm: Option<(Var, Var)>,
}

impl StagedNet {
    fn stage(tape: &Tape, blocks: &[BlockParams]) -> Self {
        let mut staged = Vec::with_capacity(blocks.len());
        let mut vars = Vec::new();
        for (i, b) in blocks.iter().enumerate() {
            let weight = tape.leaf(b.conv.weight.clone());
            let bias = tape.leaf(b.conv.bias.clone());
            vars.push((format!("b{i}.conv.w"), weight));
            vars.push((format!("b{i}.conv.b"), bias));
            let norm = b.norm.as_ref().map(|n| {
                let g = tape.leaf(n.gamma.clone());
                let be = tape.leaf(n.beta.clone());
                vars.push((format!("b{i}.norm.g"), g));
                vars.push((format!("b{i}.norm.b"), be));
                (g, be)
            });
            staged.push(StagedBlock { weight, bias, norm });
        }
        StagedNet { blocks: staged, vars, num_blocks: blocks.len() }
    }

    /// Parameter vars in the same stable order as `named_tensors`.
    pub fn param_vars(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| *v).collect()
    }

    pub fn named_vars(&self) -> &[(String, Var)] {
        &self.vars
    }
}

pub fn stage_generator(tape: &Tape, g: &ScaleGenerator) -> StagedNet {
    StagedNet::stage(tape, &g.blocks)
}

pub fn stage_discriminator(tape: &Tape, d: &ScaleDiscriminator) -> StagedNet {
    StagedNet::stage(tape, &d.blocks)
}

fn conv_block(tape: &Tape, x: Var, b: &StagedBlock) -> Var {
    let y = tape.conv2d(x, b.weight);
    let shape = tape.shape_of(y);
    let bias = tape.broadcast_chan(b.bias, shape[1], shape[2]);
    tape.add(y, bias)
}

/// Per-channel normalization over the spatial plane (instance style).
fn instance_norm(tape: &Tape, x: Var, gamma: Var, beta: Var) -> Var {
    let shape = tape.shape_of(x);
    let (h, w) = (shape[1], shape[2]);
    let inv_n = 1.0 / (h * w) as f32;
    let mu = tape.affine(tape.sum_spatial(x), inv_n, 0.0);
    let xc = tape.sub(x, tape.broadcast_chan(mu, h, w));
    let var = tape.affine(tape.sum_spatial(tape.mul(xc, xc)), inv_n, 0.0);
    let std = tape.sqrt(tape.affine(var, 1.0, NORM_EPS));
    let normalized = tape.div(xc, tape.broadcast_chan(std, h, w));
    let scaled = tape.mul(normalized, tape.broadcast_chan(gamma, h, w));
    tape.add(scaled, tape.broadcast_chan(beta, h, w))
}

/// Normalization across channels at each position, via 1x1 convolutions with
/// constant one-filled weights. Purely local: a score stays a function of its
/// input patch alone.
fn channel_norm(tape: &Tape, x: Var, gamma: Var, beta: Var) -> Var {
    let shape = tape.shape_of(x);
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let reduce = tape.leaf(Tensor::full(vec![1, c, 1, 1], 1.0));
    let expand = tape.leaf(Tensor::full(vec![c, 1, 1, 1], 1.0));
    let mu1 = tape.affine(tape.conv2d(x, reduce), 1.0 / c as f32, 0.0);
    let mu = tape.conv2d(mu1, expand);
    let xc = tape.sub(x, mu);
    let var1 = tape.affine(tape.conv2d(tape.mul(xc, xc), reduce), 1.0 / c as f32, 0.0);
    let std1 = tape.sqrt(tape.affine(var1, 1.0, NORM_EPS));
    let std = tape.conv2d(std1, expand);
    let normalized = tape.div(xc, std);
    let scaled = tape.mul(normalized, tape.broadcast_chan(gamma, h, w));
    tape.add(scaled, tape.broadcast_chan(beta, h, w))
}

/// Residual body: zero-pad by `num_blocks`, run the conv stack
/// (norm + leaky-rectifier between convs, tanh head), yielding a bounded
/// residual with the input's spatial dims.
fn generator_residual(tape: &Tape, net: &StagedNet, input: Var) -> Var {
    let mut x = tape.zero_pad(input, net.num_blocks);
    for (i, b) in net.blocks.iter().enumerate() {
        x = conv_block(tape, x, b);
        if i + 1 == net.num_blocks {
            x = tape.tanh(x);
        } else {
            if let Some((g, be)) = b.norm {
                x = instance_norm(tape, x, g, be);
            }
            x = tape.leaky_relu(x, LEAKY_SLOPE);
        }
    }
    x
}

/// `clip(prev_up + body(z + prev_up), -1, 1)` on the tape.
pub fn generator_forward_t(tape: &Tape, net: &StagedNet, z: Var, prev_up: Var) -> Var {
    let input = tape.add(z, prev_up);
    let residual = generator_residual(tape, net, input);
    tape.clamp(tape.add(prev_up, residual), -1.0, 1.0)
}

/// Unpadded conv stack; output dims shrink by `2 num_blocks`.
pub fn discriminator_forward_t(tape: &Tape, net: &StagedNet, img: Var) -> Var {
    let mut x = img;
    for (i, b) in net.blocks.iter().enumerate() {
        x = conv_block(tape, x, b);
        if i + 1 != net.num_blocks {
            if let Some((g, be)) = b.norm {
                x = channel_norm(tape, x, g, be);
            }
            x = tape.leaky_relu(x, LEAKY_SLOPE);
        }
    }
    x
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMap {
    pub height: usize,
    pub width: usize,
    pub amplitude_sigma: f32,
    data: Vec<f32>,
}

impl NoiseMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        NoiseMap { height, width, amplitude_sigma: 0.0, data: vec![0.0; CHANNELS * height * width] }
    }

    /// I.i.d. Gaussian noise scaled by `sigma` on all three channels.
    pub fn gaussian(height: usize, width: usize, sigma: f32, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..CHANNELS * height * width)
            .map(|_| {
                let g: f64 = rng.sample(StandardNormal);
                (g as f32) * sigma
            })
            .collect();
        NoiseMap { height, width, amplitude_sigma: sigma, data }
    }

    pub fn from_planar(height: usize, width: usize, sigma: f32, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), CHANNELS * height * width);
        NoiseMap { height, width, amplitude_sigma: sigma, data }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![CHANNELS, self.height, self.width], self.data.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    data: Vec<f32>,
}

impl ScoreMap {
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

pub fn image_to_tensor(img: &Image) -> Tensor {
    Tensor::new(vec![CHANNELS, img.height(), img.width()], img.samples().to_vec())
}

pub fn tensor_to_image(t: Tensor) -> Image {
    let shape = t.shape().to_vec();
    assert_eq!(shape.len(), 3);
    assert_eq!(shape[0], CHANNELS);
    Image::from_planar(shape[1], shape[2], t.into_data())
}

/// One generator pass on plain images: `prev_up + body(z + prev_up)`,
/// clipped to [-1, 1].
pub fn generator_forward(g: &ScaleGenerator, z: &NoiseMap, prev_up: &Image) -> Result<Image> {
    if z.dims() != prev_up.dims() {
        return Err(Error::invalid(format!(
            "noise {}x{} and upsampled image {}x{} dims differ",
            z.height,
            z.width,
            prev_up.height(),
            prev_up.width()
        )));
    }
    let tape = Tape::new();
    let net = stage_generator(&tape, g);
    let zv = tape.leaf(z.to_tensor());
    let pv = tape.leaf(image_to_tensor(prev_up));
    let out = generator_forward_t(&tape, &net, zv, pv);
    Ok(tensor_to_image(tape.value(out)))
}

/// Critic scores for an image; requires `min_dim > 2 num_blocks`.
pub fn discriminator_forward(d: &ScaleDiscriminator, img: &Image) -> Result<ScoreMap> {
    if img.min_dim() <= 2 * d.config.num_blocks {
        return Err(Error::invalid(format!(
            "image {}x{} is too small for a {}-block critic (needs > {})",
            img.height(),
            img.width(),
            d.config.num_blocks,
            2 * d.config.num_blocks
        )));
    }
    let tape = Tape::new();
    let net = stage_discriminator(&tape, d);
    let iv = tape.leaf(image_to_tensor(img));
    let out = discriminator_forward_t(&tape, &net, iv);
    let t = tape.value(out);
    let shape = t.shape().to_vec();
    Ok(ScoreMap { height: shape[1], width: shape[2], data: t.into_data() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::test_card;
    use proptest::prelude::*;

    fn zeroed(mut g: ScaleGenerator) -> ScaleGenerator {
        for (_, t) in g.named_tensors_mut() {
            t.data_mut().fill(0.0);
        }
        g
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let cfg = GeneratorConfig::default();
        let a = init_generator(&cfg, 2, 99);
        let b = init_generator(&cfg, 2, 99);
        assert_eq!(a, b);
        assert_ne!(a, init_generator(&cfg, 2, 100));
    }

    #[test]
    fn block_structure_matches_config() {
        let cfg = GeneratorConfig::default();
        let g = init_generator(&cfg, 0, 1);
        assert_eq!(g.blocks.len(), 5);
        assert!(g.blocks[..4].iter().all(|b| b.norm.is_some()));
        assert!(g.blocks[4].norm.is_none());
        let d = init_discriminator(&cfg, 0, 1);
        assert_eq!(d.blocks[4].conv.weight.shape(), &[1, 32, 3, 3]);
    }

    #[test]
    fn channel_width_doubles_every_four_scales() {
        let cfg = GeneratorConfig::default();
        assert_eq!(cfg.width_for_scale(0), 32);
        assert_eq!(cfg.width_for_scale(3), 32);
        assert_eq!(cfg.width_for_scale(4), 64);
        assert_eq!(cfg.width_for_scale(8), 128);
        assert_eq!(cfg.width_for_scale(12), 128); // capped
        let g0 = init_generator(&cfg, 0, 1);
        let g4 = init_generator(&cfg, 4, 1);
        assert_eq!(g0.blocks[1].conv.weight.shape(), &[32, 32, 3, 3]);
        assert_eq!(g4.blocks[1].conv.weight.shape(), &[64, 64, 3, 3]);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = GeneratorConfig::default();
        cfg.num_blocks = 2;
        assert!(cfg.validate().is_err());
        cfg = GeneratorConfig::default();
        cfg.base_channels = 4;
        assert!(cfg.validate().is_err());
        assert!(GeneratorConfig::default().validate().is_ok());
    }

    #[test]
    fn zero_body_is_residual_identity() {
        let g = zeroed(init_generator(&GeneratorConfig::default(), 0, 7));
        let prev = test_card(25, 25, 3);
        let z = NoiseMap::zeros(25, 25);
        let out = generator_forward(&g, &z, &prev).unwrap();
        assert_eq!(out, prev);
        assert_eq!(out.dims(), (25, 25));
    }

    #[test]
    fn generator_rejects_mismatched_dims() {
        let g = init_generator(&GeneratorConfig::default(), 0, 7);
        let prev = test_card(25, 25, 3);
        let z = NoiseMap::zeros(24, 25);
        assert!(generator_forward(&g, &z, &prev).is_err());
    }

    #[test]
    fn discriminator_shrinks_by_two_per_block() {
        let cfg = GeneratorConfig::default();
        let d = init_discriminator(&cfg, 0, 3);
        let s = discriminator_forward(&d, &test_card(11, 11, 1)).unwrap();
        assert_eq!((s.height, s.width), (1, 1));
        let s = discriminator_forward(&d, &test_card(64, 64, 1)).unwrap();
        assert_eq!((s.height, s.width), (54, 54));
        assert!(discriminator_forward(&d, &test_card(10, 12, 1)).is_err());
    }

    #[test]
    fn constant_input_gives_constant_scores() {
        let d = init_discriminator(&GeneratorConfig::default(), 0, 5);
        let img = Image::constant(24, 24, 0.37);
        let s = discriminator_forward(&d, &img).unwrap();
        let first = s.get(0, 0);
        assert!(s.data().iter().all(|&v| (v - first).abs() <= 1e-5));
    }

    #[test]
    fn score_depends_only_on_its_patch() {
        let cfg = GeneratorConfig::default();
        let d = init_discriminator(&cfg, 0, 9);
        let img = test_card(32, 32, 2);
        let base = discriminator_forward(&d, &img).unwrap();

        let (py, px) = (16usize, 9usize);
        let mut bumped = img.clone();
        bumped.set(1, py, px, (bumped.get(1, py, px) + 0.4).clamp(-1.0, 1.0));
        let after = discriminator_forward(&d, &bumped).unwrap();

        let reach = 2 * cfg.num_blocks; // scores at (py-reach ..= py) see the pixel
        for y in 0..base.height {
            for x in 0..base.width {
                let inside = (y + reach >= py && y <= py) && (x + reach >= px && x <= px);
                let delta = (base.get(y, x) - after.get(y, x)).abs();
                if !inside {
                    assert!(delta == 0.0, "leak at ({y},{x}): {delta}");
                }
            }
        }
        assert!(base.data() != after.data());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn generator_preserves_dims(h in 12usize..40, w in 12usize..40, seed in 0u64..50) {
            let g = init_generator(&GeneratorConfig::default(), 1, seed);
            let prev = test_card(h, w, seed);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let z = NoiseMap::gaussian(h, w, 0.5, &mut rng);
            let out = generator_forward(&g, &z, &prev).unwrap();
            prop_assert_eq!(out.dims(), (h, w));
            prop_assert!(out.samples().iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn discriminator_shape_contract(h in 11usize..48, w in 11usize..48) {
            let d = init_discriminator(&GeneratorConfig::default(), 0, 1);
            let img = test_card(h, w, 3);
            let s = discriminator_forward(&d, &img).unwrap();
            prop_assert_eq!((s.height, s.width), (h - 10, w - 10));
        }
    }
}
