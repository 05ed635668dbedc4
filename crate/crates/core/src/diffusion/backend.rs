//! Backend interface and the deterministic sampler/inverter built on it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ddim::{cfg_noise, ddim_invert_step, ddim_step};
use super::schedule::NoiseSchedule;
use crate::error::{ensure_contract, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Image, LatentShape, LatentTensor};

/// Conditioning signal for noise prediction.
///
/// The toy backend understands class indices; `Null` is the unconditional
/// (empty prompt) branch used for guidance and inversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Condition {
    #[default]
    Null,
    Class(usize),
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Null => f.write_str("null"),
            Condition::Class(c) => write!(f, "{c}"),
        }
    }
}

impl From<Condition> for String {
    fn from(c: Condition) -> String {
        c.to_string()
    }
}

impl TryFrom<String> for Condition {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("null") || s.is_empty() {
            return Ok(Condition::Null);
        }
        s.parse()
            .map(Condition::Class)
            .map_err(|_| Error::Config(format!("condition must be `null` or a class index, got `{s}`")))
    }
}

/// Sampling controls: guidance scale, condition and step count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub condition: Condition,
    pub num_inference_steps: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: 1.0,
            condition: Condition::Null,
            num_inference_steps: 20,
        }
    }
}

impl GuidanceConfig {
    pub fn new(scale: f64, condition: Condition, num_inference_steps: usize) -> Self {
        Self {
            scale,
            condition,
            num_inference_steps,
        }
    }

    pub fn validate<T: Scalar>(&self, sched: &NoiseSchedule<T>) -> Result<()> {
        if !(self.scale.is_finite() && self.scale >= 0.0) {
            return Err(Error::Config(format!(
                "guidance scale must be a finite value >= 0, got {}",
                self.scale
            )));
        }
        sched.inference_timesteps(self.num_inference_steps).map(|_| ())
    }
}

/// What a latent diffusion model must provide to be watermarked.
///
/// Only the single-item methods are required; the batch variants exist so
/// implementations can amortise work across latents and default to loops.
pub trait DiffusionBackend<T: Scalar>: Send + Sync {
    fn latent_shape(&self) -> LatentShape;

    fn schedule(&self) -> &NoiseSchedule<T>;

    /// Number of class conditions accepted as `Condition::Class(0..n)`;
    /// zero for backends that are unconditional or use other conditioning.
    fn num_conditions(&self) -> usize {
        0
    }

    fn encode(&self, image: &Image) -> Result<LatentTensor<T>>;

    fn decode(&self, latent: &LatentTensor<T>) -> Result<Image>;

    fn predict_noise(&self, latent: &LatentTensor<T>, t: usize, condition: Condition) -> Result<LatentTensor<T>>;

    fn predict_noise_batch(
        &self,
        latents: &[LatentTensor<T>],
        t: usize,
        conditions: &[Condition],
    ) -> Result<Vec<LatentTensor<T>>> {
        ensure_contract(latents.len() == conditions.len(), || {
            "one condition per latent is required".into()
        })?;
        latents
            .iter()
            .zip(conditions)
            .map(|(x, &c)| self.predict_noise(x, t, c))
            .collect()
    }

    fn encode_batch(&self, images: &[Image]) -> Result<Vec<LatentTensor<T>>> {
        images.iter().map(|im| self.encode(im)).collect()
    }

    fn decode_batch(&self, latents: &[LatentTensor<T>]) -> Result<Vec<Image>> {
        latents.iter().map(|z| self.decode(z)).collect()
    }
}

fn check_latents<T: Scalar, B: DiffusionBackend<T> + ?Sized>(backend: &B, xs: &[LatentTensor<T>]) -> Result<()> {
    let shape = backend.latent_shape();
    for x in xs {
        ensure_contract(x.shape() == shape, || {
            format!("latent has shape {}, backend expects {shape}", x.shape())
        })?;
        x.check_finite("latent")?;
    }
    Ok(())
}

/// Guided noise estimate for a batch sharing one guidance configuration.
fn guided_noise<T: Scalar, B: DiffusionBackend<T> + ?Sized>(
    backend: &B,
    xs: &[LatentTensor<T>],
    t: usize,
    guidance: &GuidanceConfig,
) -> Result<Vec<LatentTensor<T>>> {
    let cond = vec![guidance.condition; xs.len()];
    if guidance.condition == Condition::Null || guidance.scale == 1.0 {
        // both branches coincide, or the unconditional one has zero weight
        return backend.predict_noise_batch(xs, t, &cond);
    }
    let uncond = backend.predict_noise_batch(xs, t, &vec![Condition::Null; xs.len()])?;
    if guidance.scale == 0.0 {
        return Ok(uncond);
    }
    let eps_c = backend.predict_noise_batch(xs, t, &cond)?;
    let w = T::lit(guidance.scale);
    eps_c
        .iter()
        .zip(&uncond)
        .map(|(c, u)| cfg_noise(c, u, w))
        .collect()
}

/// Runs deterministic DDIM from `t = T` down to `t = 0` and returns the
/// final clean latents.
pub fn sample_latents<T: Scalar, B: DiffusionBackend<T> + ?Sized>(
    backend: &B,
    z_t: &[LatentTensor<T>],
    guidance: &GuidanceConfig,
) -> Result<Vec<LatentTensor<T>>> {
    let sched = backend.schedule();
    guidance.validate(sched)?;
    check_latents(backend, z_t)?;
    let steps = sched.inference_timesteps(guidance.num_inference_steps)?;
    let mut xs = z_t.to_vec();
    for pair in steps.windows(2).rev() {
        let (t_prev, t) = (pair[0], pair[1]);
        let eps = guided_noise(backend, &xs, t, guidance)?;
        xs = xs
            .iter()
            .zip(&eps)
            .map(|(x, e)| ddim_step(x, e, t, t_prev, sched))
            .collect::<Result<_>>()?;
    }
    Ok(xs)
}

/// Generates images from initial latents.
pub fn sample_batch<T: Scalar, B: DiffusionBackend<T> + ?Sized>(
    backend: &B,
    z_t: &[LatentTensor<T>],
    guidance: &GuidanceConfig,
) -> Result<Vec<Image>> {
    let x0 = sample_latents(backend, z_t, guidance)?;
    backend.decode_batch(&x0)
}

/// Generates one image from an initial latent.
pub fn sample<T: Scalar, B: DiffusionBackend<T> + ?Sized>(
    backend: &B,
    z_t: &LatentTensor<T>,
    guidance: &GuidanceConfig,
) -> Result<Image> {
    Ok(sample_batch(backend, std::slice::from_ref(z_t), guidance)?.remove(0))
}

/// Walks clean latents forward to `t = T` with unconditional noise
/// estimates. `steps = 0` returns the input unchanged.
pub fn invert_latents<T: Scalar, B: DiffusionBackend<T> + ?Sized>(
    backend: &B,
    x0: &[LatentTensor<T>],
    steps: usize,
) -> Result<Vec<LatentTensor<T>>> {
    check_latents(backend, x0)?;
    if steps == 0 {
        return Ok(x0.to_vec());
    }
    let sched = backend.schedule();
    let ts = sched.inference_timesteps(steps)?;
    let null = vec![Condition::Null; x0.len()];
    let mut xs = x0.to_vec();
    for pair in ts.windows(2) {
        let (t, t_next) = (pair[0], pair[1]);
        let eps = backend.predict_noise_batch(&xs, t, &null)?;
        xs = xs
            .iter()
            .zip(&eps)
            .map(|(x, e)| ddim_invert_step(x, e, t, t_next, sched))
            .collect::<Result<_>>()?;
    }
    Ok(xs)
}

/// Estimates the initial latents that generated `images`.
pub fn invert_batch<T: Scalar, B: DiffusionBackend<T> + ?Sized>(
    backend: &B,
    images: &[Image],
    steps: usize,
) -> Result<Vec<LatentTensor<T>>> {
    let latents = backend
        .encode_batch(images)
        .map_err(|e| e.context("encoding image to latent"))?;
    invert_latents(backend, &latents, steps)
}

/// Estimates the initial latent that generated `image`.
pub fn invert<T: Scalar, B: DiffusionBackend<T> + ?Sized>(
    backend: &B,
    image: &Image,
    steps: usize,
) -> Result<LatentTensor<T>> {
    Ok(invert_batch(backend, std::slice::from_ref(image), steps)?.remove(0))
}
