//! Desk-scale diffusion backend: procedural shapes, a tiny autoencoder and
//! a small conditional denoiser.

mod autoencoder;
mod denoiser;
pub mod shapes;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

pub use autoencoder::{train_autoencoder, AutoencoderConfig, AutoencoderLogEntry, TinyAutoencoder};
pub use denoiser::{
    train_toy_denoiser, DenoiserArch, DenoiserConfig, DenoiserLogEntry, DenoiserTrainingLog,
    ResBlock, ToyDenoiser,
};

use crate::diffusion::{Condition, DiffusionBackend, NoiseSchedule, ScheduleKind};
use crate::error::{ensure_contract, Error, Result};
use crate::nn::{impl_parameters, Parameters};
use crate::scalar::Scalar;
use crate::tensor::{Image, LatentShape, LatentTensor};
use autoencoder::images_to_rows;
use denoiser::{latents_to_rows, rows_to_latents};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shapes::ShapesConfig;

/// Latent shape of the toy backend.
pub const TOY_LATENT_SHAPE: LatentShape = LatentShape::new(4, 8, 8);

/// Per-channel affine map bringing autoencoder latents to zero mean and unit
/// variance on the training data.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentNorm<T> {
    pub shift: Array1<T>,
    pub scale: Array1<T>,
}

impl_parameters!(LatentNorm { shift, scale });

impl<T: Scalar> Parameters<T> for Array1<T> {
    fn tensors(&self) -> Vec<&[T]> {
        vec![self.as_slice().expect("standard layout")]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.as_slice_mut().expect("standard layout")]
    }
}

impl<T: Scalar> LatentNorm<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            shift: Array1::zeros(channels),
            scale: Array1::ones(channels),
        }
    }

    fn fit(raw: &Array2<T>, channels: usize) -> Self {
        let hw = raw.ncols() / channels;
        let mut shift = Array1::zeros(channels);
        let mut scale = Array1::ones(channels);
        for c in 0..channels {
            let vals: Vec<f64> = raw
                .rows()
                .into_iter()
                .flat_map(|r| r.iter().skip(c * hw).take(hw).map(|v| v.as_f64()).collect::<Vec<_>>())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            shift[c] = T::lit(mean);
            scale[c] = T::lit(var.sqrt().max(1e-6));
        }
        Self { shift, scale }
    }

    pub fn apply(&self, raw: &mut Array2<T>, forward: bool) {
        let channels = self.shift.len();
        let hw = raw.ncols() / channels;
        for mut row in raw.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                let c = j / hw;
                *v = if forward {
                    (*v - self.shift[c]) / self.scale[c]
                } else {
                    *v * self.scale[c] + self.shift[c]
                };
            }
        }
    }
}

/// Trained toy backend.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackend<T> {
    pub autoencoder: TinyAutoencoder<T>,
    pub norm: LatentNorm<T>,
    pub denoiser: ToyDenoiser<T>,
    pub schedule: NoiseSchedule<T>,
}

impl<T: Scalar> Parameters<T> for ToyBackend<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut v = self.autoencoder.tensors();
        v.extend(self.norm.tensors());
        v.extend(self.denoiser.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.autoencoder.tensors_mut();
        v.extend(self.norm.tensors_mut());
        v.extend(self.denoiser.tensors_mut());
        v
    }
}

/// Architecture description stored alongside the parameter blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyArch {
    pub autoencoder_hidden: usize,
    pub denoiser: DenoiserArch,
}

impl<T: Scalar> ToyBackend<T> {
    pub const SHAPE: LatentShape = TOY_LATENT_SHAPE;

    /// Randomly initialised backend with the given architecture; used to
    /// materialise a checkpoint before loading its parameters.
    pub fn with_arch(arch: ToyArch, schedule: NoiseSchedule<T>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Self {
            autoencoder: TinyAutoencoder::new(arch.autoencoder_hidden, &mut rng),
            norm: LatentNorm::identity(Self::SHAPE.channels),
            denoiser: ToyDenoiser::new(arch.denoiser, &mut rng),
            schedule,
        }
    }

    pub fn arch(&self) -> ToyArch {
        ToyArch {
            autoencoder_hidden: self.autoencoder.hidden(),
            denoiser: self.denoiser.arch(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.denoiser.num_classes()
    }

    fn condition_id(&self, c: Condition) -> Result<usize> {
        match c {
            Condition::Null => Ok(self.denoiser.null_id()),
            Condition::Class(k) if k < self.num_classes() => Ok(k),
            Condition::Class(k) => Err(Error::Config(format!(
                "class {k} out of range; the toy backend knows {} classes",
                self.num_classes()
            ))),
        }
    }

    fn check_image(image: &Image) -> Result<()> {
        let n = TinyAutoencoder::<T>::IMAGE_SIZE;
        ensure_contract(image.dims() == (3, n, n), || {
            let (c, h, w) = image.dims();
            format!("toy backend expects 3x{n}x{n} images, got {c}x{h}x{w}")
        })
    }
}

impl<T: Scalar> DiffusionBackend<T> for ToyBackend<T> {
    fn latent_shape(&self) -> LatentShape {
        Self::SHAPE
    }

    fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    fn num_conditions(&self) -> usize {
        self.num_classes()
    }

    fn encode(&self, image: &Image) -> Result<LatentTensor<T>> {
        Ok(self.encode_batch(std::slice::from_ref(image))?.remove(0))
    }

    fn decode(&self, latent: &LatentTensor<T>) -> Result<Image> {
        Ok(self.decode_batch(std::slice::from_ref(latent))?.remove(0))
    }

    fn predict_noise(&self, latent: &LatentTensor<T>, t: usize, condition: Condition) -> Result<LatentTensor<T>> {
        Ok(self
            .predict_noise_batch(std::slice::from_ref(latent), t, &[condition])?
            .remove(0))
    }

    fn predict_noise_batch(
        &self,
        latents: &[LatentTensor<T>],
        t: usize,
        conditions: &[Condition],
    ) -> Result<Vec<LatentTensor<T>>> {
        ensure_contract(latents.len() == conditions.len(), || {
            "one condition per latent is required".into()
        })?;
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        for x in latents {
            ensure_contract(x.shape() == Self::SHAPE, || {
                format!("latent has shape {}, expected {}", x.shape(), Self::SHAPE)
            })?;
        }
        let ids = conditions
            .iter()
            .map(|&c| self.condition_id(c))
            .collect::<Result<Vec<_>>>()?;
        let rows = latents_to_rows(&latents.iter().collect::<Vec<_>>());
        let out = self.denoiser.forward(&rows, &vec![t; latents.len()], &ids);
        let out = rows_to_latents(&out, Self::SHAPE);
        for e in &out {
            e.check_finite("predicted noise")?;
        }
        Ok(out)
    }

    fn encode_batch(&self, images: &[Image]) -> Result<Vec<LatentTensor<T>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        for im in images {
            Self::check_image(im)?;
        }
        let mut z = self.autoencoder.encode(&images_to_rows(&images.iter().collect::<Vec<_>>()));
        self.norm.apply(&mut z, true);
        Ok(rows_to_latents(&z, Self::SHAPE))
    }

    fn decode_batch(&self, latents: &[LatentTensor<T>]) -> Result<Vec<Image>> {
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        let mut z = latents_to_rows(&latents.iter().collect::<Vec<_>>());
        self.norm.apply(&mut z, false);
        let y = self.autoencoder.decode(&z);
        let n = TinyAutoencoder::<T>::IMAGE_SIZE;
        y.rows()
            .into_iter()
            .map(|r| Image::from_clamped(3, n, n, r.iter().map(|v| v.as_f64() as f32).collect()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyBackendConfig {
    pub num_images: usize,
    pub data_seed: u64,
    pub shapes: ShapesConfig,
    pub schedule: ScheduleKind,
    pub train_steps: usize,
    pub autoencoder: AutoencoderConfig,
    pub denoiser: DenoiserConfig,
}

impl Default for ToyBackendConfig {
    fn default() -> Self {
        Self {
            num_images: 4096,
            data_seed: 5,
            shapes: ShapesConfig::default(),
            schedule: ScheduleKind::LinearBeta,
            train_steps: 1000,
            autoencoder: AutoencoderConfig::default(),
            denoiser: DenoiserConfig::default(),
        }
    }
}

/// Training curves of both toy components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainingReport {
    pub autoencoder: Vec<AutoencoderLogEntry>,
    pub denoiser: DenoiserTrainingLog,
}

/// Generates the shapes dataset, trains the autoencoder, normalises its
/// latents and trains the denoiser on them.
pub fn train_toy_backend<T: Scalar>(cfg: &ToyBackendConfig) -> Result<(ToyBackend<T>, ToyTrainingReport)> {
    let schedule = NoiseSchedule::new(cfg.schedule, cfg.train_steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data_seed);
    let (images, labels) = shapes::dataset(cfg.num_images, &cfg.shapes, &mut rng);
    let (autoencoder, ae_log) = train_autoencoder::<T>(&images, &cfg.autoencoder)
        .map_err(|e| e.context("training the toy autoencoder"))?;
    let raw = autoencoder.encode(&images_to_rows(&images.iter().collect::<Vec<_>>()));
    let norm = LatentNorm::fit(&raw, TOY_LATENT_SHAPE.channels);
    let mut z = raw;
    norm.apply(&mut z, true);
    let latents = rows_to_latents(&z, TOY_LATENT_SHAPE);
    let (denoiser, dn_log) =
        train_toy_denoiser(&latents, &labels, shapes::NUM_CLASSES, &schedule, &cfg.denoiser)
            .map_err(|e| e.context("training the toy denoiser"))?;
    Ok((
        ToyBackend {
            autoencoder,
            norm,
            denoiser,
            schedule,
        },
        ToyTrainingReport {
            autoencoder: ae_log,
            denoiser: dn_log,
        },
    ))
}
