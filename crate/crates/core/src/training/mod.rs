//! Sequential coarse-to-fine adversarial training on a single image.
//!
//! Each scale trains a fresh generator/critic pair against the pyramid level
//! `x_n`. The critic minimizes `mean(D(fake)) - mean(D(real))` plus a
//! gradient penalty that pulls the critic's input-gradient norm toward 1; the
//! generator minimizes `-mean(D(fake)) + alpha * mse(rec, x_n)`, where the
//! reconstruction path threads the fixed noise `(z*, 0, ..., 0)` through the
//! frozen coarser scales. Scales already trained are never touched again.

mod checkpoint;


pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{resample, Image, ImagePyramid};
use crate::metrics::rmse;
use crate::networks::{
    discriminator_forward, discriminator_forward_t, generator_forward, generator_forward_t,
    image_to_tensor, init_discriminator, init_generator, stage_discriminator, stage_generator,
    GeneratorConfig, NoiseMap, ScaleDiscriminator, ScaleGenerator, StagedNet,
};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iters_per_scale: usize,
    pub d_steps: usize,
    pub g_steps: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub rec_weight_alpha: f64,
    pub gp_weight_lambda: f64,
    /// Learning rate multiplier applied once, at `lr_decay_frac` of the
    /// per-scale iteration budget.
    pub lr_decay_factor: f64,
    pub lr_decay_frac: f64,
    pub noise_base: f64,
    pub seed: u64,
    pub net: GeneratorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters_per_scale: 2000,
            d_steps: 3,
            g_steps: 3,
            learning_rate: 5e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            rec_weight_alpha: 10.0,
            gp_weight_lambda: 0.1,
            lr_decay_factor: 0.1,
            lr_decay_frac: 0.8,
            noise_base: 0.1,
            seed: 0,
            net: GeneratorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters_per_scale < 1 || self.d_steps < 1 || self.g_steps < 1 {
            return Err(Error::config("iteration and step counts must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.rec_weight_alpha < 0.0 || self.gp_weight_lambda < 0.0 {
            return Err(Error::config("loss weights must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_frac) || !(self.lr_decay_factor > 0.0) {
            return Err(Error::config("lr decay parameters out of range"));
        }
        if self.noise_base < 0.0 {
            return Err(Error::config("noise_base must be nonnegative"));
        }
        self.net.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    /// Indexed by scale: entry 0 is the finest scale, the last entry is the
    /// coarsest and always 1.
    pub sigma_per_scale: Vec<f64>,
}

impl NoiseSchedule {
    pub fn sigma(&self, scale: usize) -> f64 {
        self.sigma_per_scale[scale]
    }
}

/// Per-scale noise amplitude: 1 at the coarsest scale, otherwise
/// `noise_base * rmse(upscaled coarser reconstruction, x_n)`.
pub fn noise_sigma_for_scale(
    noise_base: f64,
    upscaled_rec: &Image,
    x_n: &Image,
    is_coarsest: bool,
) -> Result<f64> {
    if is_coarsest {
        return Ok(1.0);
    }
    Ok(noise_base * rmse(upscaled_rec, x_n)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleModel {
    pub generator: ScaleGenerator,
    pub discriminator: ScaleDiscriminator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidMeta {
    pub level_dims: Vec<(usize, usize)>,
    pub scale_factor_r: f64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// Indexed by scale: 0 is the finest.
    pub scale_models: Vec<ScaleModel>,
    pub z_star: NoiseMap,
    pub noise_schedule: NoiseSchedule,
    pub pyramid_meta: PyramidMeta,
    pub config_snapshot: TrainConfig,
    pub format_version: u32,
}

impl Checkpoint {
    pub fn num_scales(&self) -> usize {
        self.scale_models.len()
    }

    pub fn coarsest(&self) -> usize {
        self.scale_models.len() - 1
    }

    pub fn finest_dims(&self) -> (usize, usize) {
        self.pyramid_meta.level_dims[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale_models.is_empty() {
            return Err(Error::CorruptCheckpoint("no scale models".into()));
        }
        if self.scale_models.len() != self.pyramid_meta.level_dims.len()
            || self.scale_models.len() != self.noise_schedule.sigma_per_scale.len()
        {
            return Err(Error::CorruptCheckpoint(
                "scale count disagrees between models, dims and noise schedule".into(),
            ));
        }
        let coarse = self.pyramid_meta.level_dims[self.coarsest()];
        if self.z_star.dims() != coarse {
            return Err(Error::CorruptCheckpoint("z* dims do not match the coarsest level".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub scale: usize,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_rec: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<LossRecord>,
}

impl TrainLog {
    /// Per-iteration decomposed losses as CSV.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("iteration,scale,d_loss,g_adv,g_rec,sigma\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.iteration, r.scale, r.d_loss, r.g_adv, r.g_rec, r.sigma
            ));
        }
        std::fs::write(path, out)
            .map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }

    pub fn records_for_scale(&self, scale: usize) -> Vec<&LossRecord> {
        self.records.iter().filter(|r| r.scale == scale).collect()
    }
}

/// Total generator objective from its logged decomposition.
pub fn generator_total_loss(g_adv: f64, g_rec: f64, alpha: f64) -> f64 {
    g_adv + alpha * g_rec
}

/// Sample-averaged squared L2 between a generator output and the pyramid
/// level it should reproduce.
pub fn reconstruction_loss(gen_out: &Image, x_n: &Image) -> Result<f64> {
    if gen_out.dims() != x_n.dims() {
        return Err(Error::invalid(format!(
            "reconstruction dims {:?} do not match target {:?}",
            gen_out.dims(),
            x_n.dims()
        )));
    }
    let se: f64 = gen_out
        .samples()
        .iter()
        .zip(x_n.samples())
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum();
    Ok(se / gen_out.samples().len() as f64)
}

/// Generator-side adversarial loss: `-mean(D(fake))`.
pub fn adversarial_g_loss(d: &ScaleDiscriminator, fake: &Image) -> Result<f64> {
    Ok(-discriminator_forward(d, fake)?.mean())
}

/// Critic objective on the tape. The gradient penalty differentiates the sum
/// of critic scores at the interpolate `eps real + (1-eps) fake` w.r.t. that
/// interpolate, penalizing `(||grad|| - 1)^2`; the returned loss var stays
/// differentiable w.r.t. the staged critic parameters.
fn critic_loss_on_tape(
    tape: &Tape,
    net: &StagedNet,
    real: &Tensor,
    fake: &Tensor,
    gp_weight: f64,
    eps: f32,
) -> Var {
    let real_v = tape.leaf(real.clone());
    let fake_v = tape.leaf(fake.clone());
    let mixed: Vec<f32> = real
        .data()
        .iter()
        .zip(fake.data())
        .map(|(&r, &f)| eps * r + (1.0 - eps) * f)
        .collect();
    let xhat = tape.leaf(Tensor::new(real.shape().to_vec(), mixed));

    let mean_real = tape.mean_all(discriminator_forward_t(tape, net, real_v));
    let mean_fake = tape.mean_all(discriminator_forward_t(tape, net, fake_v));

    let score_sum = tape.sum_all(discriminator_forward_t(tape, net, xhat));
    let gx = tape.grad(score_sum, &[xhat])[0];
    let norm = tape.sqrt(tape.sum_all(tape.mul(gx, gx)));
    let excess = tape.affine(norm, 1.0, -1.0);
    let penalty = tape.mul(excess, excess);

    let wasserstein = tape.sub(mean_fake, mean_real);
    tape.add(wasserstein, tape.affine(penalty, gp_weight as f32, 0.0))
}

/// Critic loss value `mean(D(fake)) - mean(D(real)) + gp_weight penalty`,
/// with the interpolation factor drawn from `seed`.
pub fn adversarial_d_loss(
    d: &ScaleDiscriminator,
    real: &Image,
    fake: &Image,
    gp_weight: f64,
    seed: u64,
) -> Result<f64> {
    if real.dims() != fake.dims() {
        return Err(Error::invalid("real and fake dims differ"));
    }
    if real.min_dim() <= 2 * d.config.num_blocks {
        return Err(Error::invalid("images too small for the critic"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps: f32 = rng.random();
    let tape = Tape::new();
    let net = stage_discriminator(&tape, d);
    let loss = critic_loss_on_tape(
        &tape,
        &net,
        &image_to_tensor(real),
        &image_to_tensor(fake),
        gp_weight,
        eps,
    );
    Ok(tape.scalar_value(loss) as f64)
}

/// Adam with bias correction; moments kept in f64.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_net(lr: f64, beta1: f64, beta2: f64, tensors: &[(String, &Tensor)]) -> Self {
        let sizes: Vec<usize> = tensors.iter().map(|(_, t)| t.numel()).collect();
        Self::new(lr, beta1, beta2, &sizes)
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            let p = param.1.data_mut();
            let g = grad.data();
            assert_eq!(p.len(), g.len(), "grad shape mismatch for {}", param.0);
            for j in 0..p.len() {
                let gj = g[j] as f64;
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * gj;
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * gj * gj;
                let mhat = self.m[i][j] / bc1;
                let vhat = self.v[i][j] / bc2;
                p[j] = (p[j] as f64 - self.lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
    }
}

const TAG_ZSTAR: u64 = 1;
const TAG_G_INIT: u64 = 2;
const TAG_D_INIT: u64 = 3;
const TAG_SCALE_RNG: u64 = 4;

/// splitmix64-style mixing for derived seeds.
fn mix_seed(seed: u64, tag: u64, scale: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E3779B97F4A7C15) ^ scale.wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Fresh-noise pass through the already-trained coarser scales, returning the
/// image at scale `stop`.
fn cascade_fresh(
    models: &[Option<ScaleModel>],
    dims: &[(usize, usize)],
    sigmas: &[f64],
    stop: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Image> {
    let coarsest = dims.len() - 1;
    let mut out: Option<Image> = None;
    for n in (stop..=coarsest).rev() {
        let (h, w) = dims[n];
        let prev_up = match &out {
            None => Image::new(h, w),
            Some(img) => resample(img, h, w)?,
        };
        let z = NoiseMap::gaussian(h, w, sigmas[n] as f32, rng);
        let gen = &models[n].as_ref().expect("coarser scale trained").generator;
        out = Some(generator_forward(gen, &z, &prev_up)?);
    }
    Ok(out.expect("at least one scale"))
}

fn ensure_finite(value: f64, scale: usize, iteration: usize) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::Diverged { scale, iteration });
    }
    Ok(value)
}

/// Train every scale from coarsest to finest and assemble a checkpoint.
/// Deterministic given `config.seed` (up to platform arithmetic).
pub fn train_all_scales(
    pyramid: &ImagePyramid,
    config: &TrainConfig,
) -> Result<(Checkpoint, TrainLog)> {
    config.validate()?;
    let coarsest = pyramid.coarsest();
    let dims = pyramid.level_dims();
    let min_work = 2 * config.net.num_blocks + 1;
    let (ch, cw) = dims[coarsest];
    if ch.min(cw) < min_work {
        return Err(Error::invalid(format!(
            "coarsest level {ch}x{cw} is below the critic's minimum {min_work} pixels; raise min_size"
        )));
    }

    let (zh, zw) = dims[coarsest];
    let mut zrng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, TAG_ZSTAR, 0));
    let z_star = NoiseMap::gaussian(zh, zw, 1.0, &mut zrng);

    let mut models: Vec<Option<ScaleModel>> = vec![None; dims.len()];
    let mut sigmas = vec![0.0f64; dims.len()];
    let mut log = TrainLog::default();
    // Reconstruction image of the most recently trained (coarser) scale.
    let mut rec_prev: Option<Image> = None;

    for n in (0..=coarsest).rev() {
        let x_n = pyramid.level(n);
        let (h, w) = dims[n];

        let prev_rec_up = match &rec_prev {
            None => Image::new(h, w),
            Some(img) => resample(img, h, w)?,
        };
        sigmas[n] = noise_sigma_for_scale(config.noise_base, &prev_rec_up, x_n, n == coarsest)?;

        let mut generator = init_generator(&config.net, n, mix_seed(config.seed, TAG_G_INIT, n as u64));
        let mut discriminator =
            init_discriminator(&config.net, n, mix_seed(config.seed, TAG_D_INIT, n as u64));
        let mut adam_g = Adam::for_net(
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
            &generator.named_tensors(),
        );
        let mut adam_d = Adam::for_net(
            config.learning_rate,
            config.adam_beta1,
            config.adam_beta2,
            &discriminator.named_tensors(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, TAG_SCALE_RNG, n as u64));

        let decay_at = (config.iters_per_scale as f64 * config.lr_decay_frac) as usize;
        let x_n_tensor = image_to_tensor(x_n);
        let rec_noise = if n == coarsest {
            z_star.clone()
        } else {
            NoiseMap::zeros(h, w)
        };

        for iteration in 0..config.iters_per_scale {
            if iteration == decay_at && decay_at > 0 && decay_at < config.iters_per_scale {
                adam_g.set_lr(adam_g.lr() * config.lr_decay_factor);
                adam_d.set_lr(adam_d.lr() * config.lr_decay_factor);
            }

            // One fresh pass through the frozen coarser scales per iteration,
            // shared by this iteration's critic and generator steps.
            let prev_fake_up = if n == coarsest {
                Image::new(h, w)
            } else {
                let below = cascade_fresh(&models, &dims, &sigmas, n + 1, &mut rng)?;
                resample(&below, h, w)?
            };

            let mut d_loss = 0.0;
            for _ in 0..config.d_steps {
                let z = NoiseMap::gaussian(h, w, sigmas[n] as f32, &mut rng);
                let fake = generator_forward(&generator, &z, &prev_fake_up)?;
                let eps: f32 = rng.random();

                let tape = Tape::new();
                let net = stage_discriminator(&tape, &discriminator);
                let loss = critic_loss_on_tape(
                    &tape,
                    &net,
                    &x_n_tensor,
                    &image_to_tensor(&fake),
                    config.gp_weight_lambda,
                    eps,
                );
                d_loss = ensure_finite(tape.scalar_value(loss) as f64, n, iteration)?;
                let grads: Vec<Tensor> =
                    tape.grad(loss, &net.param_vars()).iter().map(|&g| tape.value(g)).collect();
                adam_d.step(&mut discriminator.named_tensors_mut(), &grads);
            }

            let (mut g_adv, mut g_rec) = (0.0, 0.0);
            for _ in 0..config.g_steps {
                let z = NoiseMap::gaussian(h, w, sigmas[n] as f32, &mut rng);

                let tape = Tape::new();
                let g_net = stage_generator(&tape, &generator);
                let d_net = stage_discriminator(&tape, &discriminator);
                let zv = tape.leaf(z.to_tensor());
                let prevv = tape.leaf(image_to_tensor(&prev_fake_up));
                let fake_v = generator_forward_t(&tape, &g_net, zv, prevv);
                let adv = tape.neg(tape.mean_all(discriminator_forward_t(&tape, &d_net, fake_v)));

                let z_rec_v = tape.leaf(rec_noise.to_tensor());
                let prev_rec_v = tape.leaf(image_to_tensor(&prev_rec_up));
                let rec_v = generator_forward_t(&tape, &g_net, z_rec_v, prev_rec_v);
                let target_v = tape.leaf(x_n_tensor.clone());
                let rec = tape.mse(rec_v, target_v);

                let total = tape.add(adv, tape.affine(rec, config.rec_weight_alpha as f32, 0.0));
                g_adv = ensure_finite(tape.scalar_value(adv) as f64, n, iteration)?;
                g_rec = ensure_finite(tape.scalar_value(rec) as f64, n, iteration)?;
                let grads: Vec<Tensor> =
                    tape.grad(total, &g_net.param_vars()).iter().map(|&g| tape.value(g)).collect();
                adam_g.step(&mut generator.named_tensors_mut(), &grads);
            }

            log.records.push(LossRecord {
                iteration,
                scale: n,
                d_loss,
                g_adv,
                g_rec,
                sigma: sigmas[n],
            });
        }

        rec_prev = Some(generator_forward(&generator, &rec_noise, &prev_rec_up)?);
        models[n] = Some(ScaleModel { generator, discriminator });
    }

    let checkpoint = Checkpoint {
        scale_models: models.into_iter().map(|m| m.expect("all scales trained")).collect(),
        z_star,
        noise_schedule: NoiseSchedule { sigma_per_scale: sigmas },
        pyramid_meta: PyramidMeta { level_dims: dims, scale_factor_r: pyramid.scale_factor() },
        config_snapshot: config.clone(),
        format_version: CHECKPOINT_FORMAT_VERSION,
    };
    Ok((checkpoint, log))
}
