//! Noise schedule, forward noising, DDIM sampling and classifier-free guidance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::mask::Mask;
use crate::model::{decode_latent, FeatureCache, ForwardItem, LatentGrid, Model};
use crate::raster::Raster;

/// Training horizon `T`.
pub const TRAIN_STEPS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

/// Linear betas from `beta_start` to `beta_end` over `steps` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    ensure!(steps > 0, "schedule needs at least one step");
    ensure!(
        beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
        "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
    );
    let betas: Vec<f64> = (0..steps)
        .map(|i| if steps == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64 })
        .collect();
    let alphas_cumprod = betas
        .iter()
        .scan(1.0, |acc, b| {
            *acc *= 1.0 - b;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { betas, alphas_cumprod })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(TRAIN_STEPS, 1e-4, 0.02).expect("valid default schedule")
    }
}

impl NoiseSchedule {
    /// Schedule with the given cumulative products, which must decrease strictly inside `(0, 1]`.
    pub fn from_alphas_cumprod(alphas_cumprod: Vec<f64>) -> Result<Self> {
        ensure!(!alphas_cumprod.is_empty(), "empty schedule");
        ensure!(alphas_cumprod.iter().all(|&a| a > 0.0 && a <= 1.0), "alphas_cumprod must lie in (0, 1]");
        ensure!(alphas_cumprod.windows(2).all(|w| w[1] < w[0]), "alphas_cumprod must decrease strictly");
        let betas = alphas_cumprod.iter().scan(1.0, |prev, &a| {
            let b = 1.0 - a / *prev;
            *prev = a;
            Some(b)
        });
        Ok(NoiseSchedule { betas: betas.collect(), alphas_cumprod })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    /// `ᾱ_t`, or 1 for the clean state `None`.
    pub fn alpha_bar(&self, t: Option<usize>) -> f64 {
        t.map_or(1.0, |t| self.alphas_cumprod[t])
    }
}

/// `√ᾱ·x0 + √(1−ᾱ)·eps` for one value.
pub fn q_sample_scalar(x0: f64, eps: f64, alpha_bar: f64) -> f64 {
    alpha_bar.sqrt() * x0 + (1.0 - alpha_bar).sqrt() * eps
}

pub fn q_sample(x0: &LatentGrid, t: usize, eps: &LatentGrid, schedule: &NoiseSchedule) -> Result<LatentGrid> {
    ensure!(t < schedule.len(), "timestep {t} outside [0, {})", schedule.len());
    ensure!(x0.same_shape(eps), "x0 and noise shapes differ");
    let ab = schedule.alphas_cumprod[t];
    let values = x0.values.iter().zip(&eps.values).map(|(&x, &e)| q_sample_scalar(x as f64, e as f64, ab) as f32).collect();
    Ok(LatentGrid { values, ..x0.clone() })
}

/// Mean squared error over all elements, or over the rows of masked latent
/// cells when `mask` is given (`channels` values per cell).
pub fn training_loss(pred: &[f32], target: &[f32], mask: Option<(&Mask, usize)>) -> Result<f64> {
    ensure!(pred.len() == target.len(), "prediction has {} values, target {}", pred.len(), target.len());
    ensure!(!pred.is_empty(), "empty prediction");
    let sq = |a: &f32, b: &f32| (*a as f64 - *b as f64).powi(2);
    match mask {
        None => Ok(pred.iter().zip(target).map(|(a, b)| sq(a, b)).sum::<f64>() / pred.len() as f64),
        Some((m, c)) => {
            ensure!(m.bits().len() * c == pred.len(), "mask does not cover the latent");
            let (mut sum, mut n) = (0.0, 0usize);
            for (i, _) in m.bits().iter().enumerate().filter(|(_, &b)| b) {
                sum += pred[i * c..(i + 1) * c].iter().zip(&target[i * c..(i + 1) * c]).map(|(a, b)| sq(a, b)).sum::<f64>();
                n += c;
            }
            ensure!(n > 0, "mask selects no latent cells");
            Ok(sum / n as f64)
        }
    }
}

/// Deterministic DDIM update of one value from `ᾱ_t` to `ᾱ_prev`.
pub fn ddim_scalar(x_t: f64, eps: f64, alpha_bar_t: f64, alpha_bar_prev: f64) -> f64 {
    let x0 = (x_t - (1.0 - alpha_bar_t).sqrt() * eps) / alpha_bar_t.sqrt();
    alpha_bar_prev.sqrt() * x0 + (1.0 - alpha_bar_prev).sqrt() * eps
}

/// One DDIM step from `t` to `t_prev` (`None` = clean).
///
/// With `eta > 0` the step is stochastic and `noise` must be supplied.
pub fn ddim_step(
    x_t: &LatentGrid,
    eps: &LatentGrid,
    t: usize,
    t_prev: Option<usize>,
    schedule: &NoiseSchedule,
    eta: f64,
    noise: Option<&LatentGrid>,
) -> Result<LatentGrid> {
    ensure!(t < schedule.len(), "timestep {t} outside [0, {})", schedule.len());
    ensure!(t_prev.is_none_or(|p| p < t), "t_prev must precede t = {t}");
    ensure!(x_t.same_shape(eps), "latent and noise prediction shapes differ");
    ensure!(eta >= 0.0, "eta must be nonnegative");
    let (ab, ab_prev) = (schedule.alpha_bar(Some(t)), schedule.alpha_bar(t_prev));
    if eta == 0.0 {
        let values = x_t.values.iter().zip(&eps.values).map(|(&x, &e)| ddim_scalar(x as f64, e as f64, ab, ab_prev) as f32).collect();
        return Ok(LatentGrid { values, ..x_t.clone() });
    }
    let noise = noise.ok_or_else(|| crate::Error::invalid("a stochastic step (eta > 0) needs noise"))?;
    ensure!(noise.same_shape(x_t), "noise shape differs from the latent");
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let values = x_t
        .values
        .iter()
        .zip(&eps.values)
        .zip(&noise.values)
        .map(|((&x, &e), &z)| {
            let x0 = (x as f64 - (1.0 - ab).sqrt() * e as f64) / ab.sqrt();
            (ab_prev.sqrt() * x0 + dir * e as f64 + sigma * z as f64) as f32
        })
        .collect();
    Ok(LatentGrid { values, ..x_t.clone() })
}

/// `(1 − s)·uncond + s·cond`, i.e. `uncond + s·(cond − uncond)`.
pub fn cfg_combine(uncond: &LatentGrid, cond: &LatentGrid, scale: f32) -> Result<LatentGrid> {
    ensure!(uncond.same_shape(cond), "guidance inputs have different shapes");
    let values = uncond.values.iter().zip(&cond.values).map(|(&u, &c)| (1.0 - scale) * u + scale * c).collect();
    Ok(LatentGrid { values, ..cond.clone() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f32,
    pub eta: f64,
    /// Clamp each step's clean-latent estimate to `[-1, 1]`, the range of
    /// encoded images, and continue from the matching noise estimate.
    pub clip_denoised: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 50, guidance_scale: 7.5, eta: 0.0, clip_denoised: true }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!((1..=TRAIN_STEPS).contains(&self.steps), "steps must be in [1, {TRAIN_STEPS}], got {}", self.steps);
        ensure!(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0, "guidance_scale must be >= 0");
        ensure!(self.eta.is_finite() && self.eta >= 0.0, "eta must be >= 0");
        Ok(())
    }
}

/// Evenly spaced timesteps from `T − 1` downwards; the chain ends at the clean state.
pub fn sampling_timesteps(steps: usize, horizon: usize) -> Vec<usize> {
    (0..steps).rev().map(|i| (i + 1) * horizon / steps - 1).collect()
}

/// Runs the DDIM chain for one source image and composites the result.
///
/// The unconditional branch uses an empty cache (no references, null
/// semantic token, no prompt); it is skipped when `cache` is itself
/// unconditional or when the guidance scale is exactly 1.
pub fn sample_completion(
    model: &Model,
    cache: &FeatureCache,
    source: &Raster,
    mask: &Mask,
    config: &SamplerConfig,
    seed: u64,
) -> Result<Raster> {
    config.validate()?;
    ensure!(!mask.is_empty(), "source mask is empty");
    ensure!(mask.height() == source.height() && mask.width() == source.width(), "source mask does not match the source size");
    let schedule = NoiseSchedule::default();
    let (lm, masked) = model.source_inputs(source, mask)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = LatentGrid { values: (0..masked.values.len()).map(|_| StandardNormal.sample(&mut rng)).collect(), ..masked.clone() };
    let uncond = FeatureCache::empty();
    let guided = config.guidance_scale != 1.0 && !cache.is_unconditional();
    let ts = sampling_timesteps(config.steps, schedule.len());
    for (i, &t) in ts.iter().enumerate() {
        let item = |c| ForwardItem { noisy: &x, latent_mask: &lm, masked: &masked, t, cache: c };
        let eps = if guided {
            let out = model.complete_forward_batch(&[item(&uncond), item(cache)])?;
            cfg_combine(&out[0], &out[1], config.guidance_scale)?
        } else {
            model.complete_forward_batch(&[item(cache)])?.pop().unwrap()
        };
        let eps = if config.clip_denoised { clip_denoised(&x, &eps, schedule.alpha_bar(Some(t))) } else { eps };
        let noise = (config.eta > 0.0)
            .then(|| LatentGrid { values: (0..x.values.len()).map(|_| StandardNormal.sample(&mut rng)).collect(), ..x.clone() });
        x = ddim_step(&x, &eps, t, ts.get(i + 1).copied(), &schedule, config.eta, noise.as_ref())?;
    }
    let generated = decode_latent(&x.affine(0.5, 0.5), model.config().latent_factor)?.clamped();
    composite(source, &generated, mask)
}

/// Noise estimate whose implied clean latent is clamped to `[-1, 1]`.
pub fn clip_denoised(x_t: &LatentGrid, eps: &LatentGrid, alpha_bar: f64) -> LatentGrid {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let values = x_t
        .values
        .iter()
        .zip(&eps.values)
        .map(|(&x, &e)| {
            let x0 = ((x as f64 - b * e as f64) / a).clamp(-1.0, 1.0);
            ((x as f64 - a * x0) / b) as f32
        })
        .collect();
    LatentGrid { values, ..eps.clone() }
}

/// `generated` inside `mask`, `source` elsewhere.
pub fn composite(source: &Raster, generated: &Raster, mask: &Mask) -> Result<Raster> {
    ensure!(source.same_size(generated), "composite inputs differ in size");
    ensure!(mask.height() == source.height() && mask.width() == source.width(), "mask does not match the image size");
    let mut out = source.clone();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                out.set_pixel(y, x, generated.pixel(y, x));
            }
        }
    }
    Ok(out)
}
