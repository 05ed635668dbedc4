use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{decode_bits, encode_batch, CodecParams};
use crate::detector::Extractor;
use crate::diffusion::{invert_batch, sample_batch, DiffusionBackend, GuidanceConfig};
use crate::ecc::RscCode;
use crate::error::{ensure_contract, Result};
use crate::message::BitMessage;
use crate::scalar::Scalar;
use crate::tensor::{Image, LatentShape, LatentTensor};

/// Reparameterisation noise for an embedding seed.
pub fn watermark_noise<T: Scalar>(seed: u64, shape: LatentShape) -> LatentTensor<T> {
    LatentTensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn watermark_bits(payload: &BitMessage, ecc: Option<&RscCode>, k: usize) -> Result<BitMessage> {
    let bits = match ecc {
        Some(code) => code.encode(payload)?.bits,
        None => payload.clone(),
    };
    ensure_contract(bits.len() == k, || {
        format!(
            "payload of {} bits yields a {}-bit watermark, codec expects {k}",
            payload.len(),
            bits.len()
        )
    })?;
    Ok(bits)
}

/// Generates a watermarked image for `payload`.
///
/// The payload is RSC-encoded when `ecc` is given; the resulting watermark
/// bits are returned with the image.
pub fn embed<T: Scalar, B: DiffusionBackend<T> + ?Sized>(
    payload: &BitMessage,
    seed: u64,
    codec: &CodecParams<T>,
    backend: &B,
    guidance: &GuidanceConfig,
    ecc: Option<&RscCode>,
) -> Result<(Image, BitMessage)> {
    let mut out = embed_batch(std::slice::from_ref(payload), &[seed], codec, backend, guidance, ecc)?;
    Ok(out.remove(0))
}

/// Batched [`embed`]; all items share one guidance configuration.
pub fn embed_batch<T: Scalar, B: DiffusionBackend<T> + ?Sized>(
    payloads: &[BitMessage],
    seeds: &[u64],
    codec: &CodecParams<T>,
    backend: &B,
    guidance: &GuidanceConfig,
    ecc: Option<&RscCode>,
) -> Result<Vec<(Image, BitMessage)>> {
    ensure_contract(payloads.len() == seeds.len(), || "one seed per payload is required".into())?;
    ensure_contract(codec.latent_shape() == backend.latent_shape(), || {
        format!(
            "codec latent shape {} does not match backend shape {}",
            codec.latent_shape(),
            backend.latent_shape()
        )
    })?;
    let bits = payloads
        .iter()
        .map(|p| watermark_bits(p, ecc, codec.k()))
        .collect::<Result<Vec<_>>>()?;
    let noise: Vec<LatentTensor<T>> = seeds.iter().map(|&s| watermark_noise(s, codec.latent_shape())).collect();
    let zs: Vec<LatentTensor<T>> = encode_batch(&bits, &noise, codec)?.into_iter().map(|e| e.0).collect();
    let images = sample_batch(backend, &zs, guidance)?;
    Ok(images.into_iter().zip(bits).collect())
}

/// Inversion plus decoding: recovers watermark bits from images.
pub struct WatermarkPipeline<'a, T: Scalar, B: ?Sized> {
    pub backend: &'a B,
    pub codec: &'a CodecParams<T>,
    pub inversion_steps: usize,
    pub ecc: Option<RscCode>,
}

impl<'a, T: Scalar, B: DiffusionBackend<T> + ?Sized> WatermarkPipeline<'a, T, B> {
    pub fn new(backend: &'a B, codec: &'a CodecParams<T>, inversion_steps: usize, ecc: Option<RscCode>) -> Self {
        Self {
            backend,
            codec,
            inversion_steps,
            ecc,
        }
    }

    pub fn extract_batch(&self, images: &[Image]) -> Result<Vec<BitMessage>> {
        let latents = invert_batch(self.backend, images, self.inversion_steps)?;
        decode_bits(&latents, self.codec)
    }
}

impl<T: Scalar, B: DiffusionBackend<T> + ?Sized> Extractor for WatermarkPipeline<'_, T, B> {
    fn extract_bits(&self, image: &Image) -> Result<BitMessage> {
        Ok(self.extract_batch(std::slice::from_ref(image))?.remove(0))
    }

    fn ecc(&self) -> Option<&RscCode> {
        self.ecc.as_ref()
    }
}
