//! Two-layer convolutional autoencoder between 3x32x32 images and 4x8x8
//! latents.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    clip_grad_norm, impl_parameters, silu, silu_backward, Adam, Conv2d, ConvGeometry,
    ConvTranspose2d, Parameters,
};
use crate::scalar::Scalar;
use crate::tensor::Image;

const fn down(cin: usize, cout: usize) -> ConvGeometry {
    ConvGeometry {
        in_channels: cin,
        out_channels: cout,
        kernel: 4,
        stride: 2,
        padding: 1,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyAutoencoder<T> {
    pub enc1: Conv2d<T>,
    pub enc2: Conv2d<T>,
    pub dec1: ConvTranspose2d<T>,
    pub dec2: ConvTranspose2d<T>,
}

impl_parameters!(TinyAutoencoder { enc1, enc2, dec1, dec2 });

/// Intermediate activations kept for the backward pass.
struct EncodeCache<T> {
    h1: Array2<T>,
    a1: Array2<T>,
}

struct DecodeCache<T> {
    g1: Array2<T>,
    b1: Array2<T>,
}

impl<T: Scalar> TinyAutoencoder<T> {
    pub const IMAGE_CHANNELS: usize = 3;
    pub const IMAGE_SIZE: usize = 32;
    pub const LATENT_CHANNELS: usize = 4;
    pub const LATENT_SIZE: usize = 8;

    pub fn new<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        let (c, l) = (Self::IMAGE_CHANNELS, Self::LATENT_CHANNELS);
        Self {
            enc1: Conv2d::new(down(c, hidden), 1.0, rng),
            enc2: Conv2d::new(down(hidden, l), 1.0, rng),
            dec1: ConvTranspose2d::new(down(l, hidden), 1.0, rng),
            dec2: ConvTranspose2d::new(down(hidden, c), 1.0, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.enc1.geometry.out_channels
    }

    fn image_hw() -> (usize, usize) {
        (Self::IMAGE_SIZE, Self::IMAGE_SIZE)
    }

    fn mid_hw() -> (usize, usize) {
        (Self::IMAGE_SIZE / 2, Self::IMAGE_SIZE / 2)
    }

    fn latent_hw() -> (usize, usize) {
        (Self::LATENT_SIZE, Self::LATENT_SIZE)
    }

    fn encode_cached(&self, x: &Array2<T>) -> (Array2<T>, EncodeCache<T>) {
        let h1 = self.enc1.forward(x, Self::image_hw());
        let a1 = silu(&h1);
        let z = self.enc2.forward(&a1, Self::mid_hw());
        (z, EncodeCache { h1, a1 })
    }

    fn decode_cached(&self, z: &Array2<T>) -> (Array2<T>, DecodeCache<T>) {
        let g1 = self.dec1.forward(z, Self::latent_hw());
        let b1 = silu(&g1);
        let y = self.dec2.forward(&b1, Self::mid_hw());
        (y, DecodeCache { g1, b1 })
    }

    /// Raw (unnormalised) latents for a batch of flattened images.
    pub fn encode(&self, x: &Array2<T>) -> Array2<T> {
        self.encode_cached(x).0
    }

    /// Unclamped pixel values for a batch of raw latents.
    pub fn decode(&self, z: &Array2<T>) -> Array2<T> {
        self.decode_cached(z).0
    }

    fn encode_backward(&self, x: &Array2<T>, cache: &EncodeCache<T>, dz: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let da1 = self.enc2.backward(&cache.a1, Self::mid_hw(), dz, &mut grad.enc2);
        let dh1 = silu_backward(&cache.h1, &da1);
        self.enc1.backward(x, Self::image_hw(), &dh1, &mut grad.enc1)
    }

    fn decode_backward(&self, z: &Array2<T>, cache: &DecodeCache<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let db1 = self.dec2.backward(&cache.b1, Self::mid_hw(), dy, &mut grad.dec2);
        let dg1 = silu_backward(&cache.g1, &db1);
        self.dec1.backward(z, Self::latent_hw(), &dg1, &mut grad.dec1)
    }
}

/// Stacks images into a `(batch, c*h*w)` matrix.
pub(crate) fn images_to_rows<T: Scalar>(images: &[&Image]) -> Array2<T> {
    let width = images.first().map_or(0, |im| im.as_slice().len());
    Array2::from_shape_fn((images.len(), width), |(b, j)| T::lit(images[b].as_slice()[j] as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the latent cycle term `|Enc(Dec(z)) - z|^2`.
    pub cycle_weight: f64,
    /// Perturbation added to data latents before the cycle term, relative
    /// to the batch latent standard deviation.
    pub cycle_noise: f64,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            steps: 1500,
            batch_size: 32,
            learning_rate: 2e-3,
            cycle_weight: 1.0,
            cycle_noise: 0.5,
            seed: 11,
        }
    }
}

/// Per-step metrics from autoencoder training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderLogEntry {
    pub step: usize,
    pub reconstruction: f64,
    pub cycle: f64,
}

fn mse<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> (f64, Array2<T>) {
    let diff = a - b;
    let n = T::lit(diff.len() as f64);
    let loss = diff.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / diff.len() as f64;
    (loss, diff.mapv(|d| T::lit(2.0) * d / n))
}

/// Trains the autoencoder on `images` with reconstruction and latent-cycle
/// losses.
pub fn train_autoencoder<T: Scalar>(
    images: &[Image],
    cfg: &AutoencoderConfig,
) -> Result<(TinyAutoencoder<T>, Vec<AutoencoderLogEntry>)> {
    if images.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("autoencoder training needs images and a positive batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = TinyAutoencoder::<T>::new(cfg.hidden, &mut rng);
    let mut opt = Adam::new(T::lit(cfg.learning_rate));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&Image> = (0..cfg.batch_size)
            .map(|_| {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                cursor += 1;
                &images[order[cursor - 1]]
            })
            .collect();
        let x = images_to_rows::<T>(&batch);
        let mut grad = model.zeros_like();

        let (z, ecache) = model.encode_cached(&x);
        let (y, dcache) = model.decode_cached(&z);
        let (rec, dy) = mse(&y, &x);
        let dz = model.decode_backward(&z, &dcache, &dy, &mut grad);
        model.encode_backward(&x, &ecache, &dz, &mut grad);

        let std = (z.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / z.len() as f64).sqrt();
        let noise = Array2::from_shape_fn(z.dim(), |_| T::lit(cfg.cycle_noise * std) * T::sample_normal(&mut rng));
        let z_in = &z + &noise;
        let (img, dcache2) = model.decode_cached(&z_in);
        let (z_back, ecache2) = model.encode_cached(&img);
        let (cyc, dzb) = mse(&z_back, &z_in);
        let dzb = dzb.mapv(|v| v * T::lit(cfg.cycle_weight));
        let dimg = model.encode_backward(&img, &ecache2, &dzb, &mut grad);
        model.decode_backward(&z_in, &dcache2, &dimg, &mut grad);

        clip_grad_norm(&mut grad, T::lit(5.0));
        opt.step(&mut model, &grad);
        if !rec.is_finite() || !cyc.is_finite() {
            return Err(Error::Training {
                message: "autoencoder loss diverged".into(),
                metrics: format!("step={step} reconstruction={rec} cycle={cyc}"),
            });
        }
        log.push(AutoencoderLogEntry {
            step,
            reconstruction: rec,
            cycle: cyc,
        });
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::shapes::{dataset, ShapesConfig};

    #[test]
    fn shapes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ae = TinyAutoencoder::<f32>::new(8, &mut rng);
        let x = Array2::<f32>::zeros((2, 3 * 32 * 32));
        let z = ae.encode(&x);
        assert_eq!(z.dim(), (2, 4 * 8 * 8));
        assert_eq!(ae.decode(&z).dim(), (2, 3 * 32 * 32));
    }

    #[test]
    fn short_training_reduces_reconstruction_error() {
        let (images, _) = dataset(64, &ShapesConfig::default(), &mut ChaCha8Rng::seed_from_u64(1));
        let cfg = AutoencoderConfig {
            hidden: 8,
            steps: 60,
            batch_size: 8,
            ..Default::default()
        };
        let (_, log) = train_autoencoder::<f32>(&images, &cfg).unwrap();
        let first = log[0].reconstruction;
        let last = log.iter().rev().take(10).map(|e| e.reconstruction).sum::<f64>() / 10.0;
        assert!(last < first * 0.5, "{first} -> {last}");
    }
}
