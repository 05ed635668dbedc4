//! Multi-bit watermarking of diffusion-model initial latents.
//!
//! A message encoder maps watermark bits to a Gaussian-looking starting
//! latent; generation proceeds unchanged from it. To extract, the image is
//! encoded back to a latent, DDIM-inverted to the starting noise and decoded
//! into bits, which a binomial test turns into a detection decision. A
//! recursive systematic convolutional code protects identity payloads, and a
//! small class-conditional toy backend makes the whole chain runnable on a
//! CPU.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix it to `f32`.

pub mod attack;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod detector;
pub mod diffusion;
pub mod ecc;
pub mod error;
pub mod eval;
pub mod message;
pub mod nn;
pub mod registry;
pub mod scalar;
pub mod special;
pub mod tensor;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
pub use message::BitMessage;
pub use scalar::Scalar;
pub use tensor::{Image, LatentShape, LatentTensor};

/// `f32` latent.
pub type Latent = LatentTensor<f32>;
/// `f32` message codec.
pub type Codec = codec::CodecParams<f32>;
/// `f32` toy backend.
pub type Backend = toy::ToyBackend<f32>;
/// `f32` noise schedule.
pub type Schedule = diffusion::NoiseSchedule<f32>;
