use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_bce, mean_bit_accuracy};
use crate::attack::{apply_attack, sample_random_attack, AttackKind, AttackSpec};
use crate::codec::{decode_bits, encode_batch, latent_rows, CodecParams};
use crate::diffusion::{invert_batch, sample_batch, Condition, DiffusionBackend, GuidanceConfig};
use crate::error::{ensure_contract, Error, Result};
use crate::message::BitMessage;
use crate::nn::{clip_grad_norm, Adam, Parameters};
use crate::scalar::Scalar;
use crate::tensor::{Image, LatentTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Number of watermarked images generated for training.
    pub pool_images: usize,
    /// Attacked copies inverted per generated image.
    pub variants_per_image: usize,
    /// Probability that a copy is left unattacked.
    pub clean_fraction: f64,
    /// Extra examples decoded straight from encoder latents, as a fraction
    /// of the inverted examples; they anchor the diffusion-free path.
    pub direct_fraction: f64,
    pub sample_steps: usize,
    pub inversion_steps: usize,
    /// Guidance scales for generation are drawn uniformly from this range.
    pub guidance_min: f64,
    pub guidance_max: f64,
    /// Probability of generating with the unconditional branch only.
    pub unconditional_fraction: f64,
    /// Kinds the random attack layer may draw from.
    pub attack_pool: Vec<AttackKind>,
    /// Images per generation batch; each batch shares one guidance setting.
    pub generation_batch: usize,
    pub seed: u64,
    /// Held-out images for the clean-path regression check.
    pub eval_images: usize,
    pub max_clean_drop: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            learning_rate: 5e-4,
            pool_images: 1024,
            variants_per_image: 4,
            clean_fraction: 0.25,
            direct_fraction: 0.25,
            sample_steps: 20,
            inversion_steps: 5,
            guidance_min: 1.0,
            guidance_max: 20.0,
            unconditional_fraction: 0.2,
            attack_pool: AttackKind::BUILTIN.to_vec(),
            generation_batch: 16,
            seed: 29,
            eval_images: 128,
            max_clean_drop: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLogEntry {
    pub step: usize,
    pub bce: f64,
    pub bit_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub examples: usize,
    pub log: Vec<FinetuneLogEntry>,
    /// Generate-invert-decode accuracy without attacks, before and after.
    pub clean_before: f64,
    pub clean_after: f64,
    /// Encoder-to-decoder accuracy without diffusion, before and after.
    pub direct_before: f64,
    pub direct_after: f64,
}

/// Draws an attack whose kind belongs to `pool`.
fn pooled_attack(pool: &[AttackKind], rng: &mut ChaCha8Rng) -> Option<AttackSpec> {
    if pool.is_empty() {
        return None;
    }
    loop {
        let spec = sample_random_attack(rng.random());
        if pool.contains(&spec.kind) {
            return Some(spec);
        }
    }
}

/// Watermarked images with their messages and the encoder latents.
struct Generated<T> {
    images: Vec<Image>,
    messages: Vec<BitMessage>,
    latents: Vec<LatentTensor<T>>,
}

fn generate<T: Scalar, B: DiffusionBackend<T> + ?Sized>(
    codec: &CodecParams<T>,
    backend: &B,
    cfg: &FinetuneConfig,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Generated<T>> {
    let shape = codec.latent_shape();
    let mut out = Generated {
        images: Vec::with_capacity(count),
        messages: Vec::with_capacity(count),
        latents: Vec::with_capacity(count),
    };
    let num_classes = backend.num_conditions();
    while out.images.len() < count {
        let size = cfg.generation_batch.max(1).min(count - out.images.len());
        let msgs: Vec<BitMessage> = (0..size).map(|_| BitMessage::random(codec.k(), rng)).collect();
        let noise: Vec<LatentTensor<T>> = (0..size).map(|_| LatentTensor::randn(shape, rng)).collect();
        let zs: Vec<LatentTensor<T>> = encode_batch(&msgs, &noise, codec)?.into_iter().map(|e| e.0).collect();
        let scale = if cfg.guidance_max > cfg.guidance_min {
            rng.random_range(cfg.guidance_min..=cfg.guidance_max)
        } else {
            cfg.guidance_min
        };
        let condition = if num_classes == 0 || rng.random_bool(cfg.unconditional_fraction) {
            Condition::Null
        } else {
            Condition::Class(rng.random_range(0..num_classes))
        };
        let guidance = GuidanceConfig::new(scale, condition, cfg.sample_steps);
        out.images.extend(sample_batch(backend, &zs, &guidance)?);
        out.messages.extend(msgs);
        out.latents.extend(zs);
    }
    Ok(out)
}

fn end_to_end_accuracy<T: Scalar, B: DiffusionBackend<T> + ?Sized>(
    codec: &CodecParams<T>,
    backend: &B,
    set: &Generated<T>,
    inversion_steps: usize,
) -> Result<(f64, f64)> {
    let inverted = invert_batch(backend, &set.images, inversion_steps)?;
    let chain = mean_bit_accuracy(&set.messages, &decode_bits(&inverted, codec)?);
    let direct = mean_bit_accuracy(&set.messages, &decode_bits(&set.latents, codec)?);
    Ok((chain, direct))
}

/// Fine-tunes the decoder on inverted latents of attacked, watermarked
/// generations while the encoder stays frozen.
///
/// Each training example is one generated image passed through one random
/// attack from `cfg.attack_pool` (or left clean) and inverted with
/// `cfg.inversion_steps` unconditional DDIM steps. Fails with
/// [`Error::Training`] if the unattacked accuracy drops by more than
/// `cfg.max_clean_drop`.
pub fn finetune_decoder<T: Scalar, B: DiffusionBackend<T> + ?Sized>(
    codec: &CodecParams<T>,
    backend: &B,
    cfg: &FinetuneConfig,
) -> Result<(CodecParams<T>, FinetuneReport)> {
    ensure_contract(codec.latent_shape() == backend.latent_shape(), || {
        "codec and backend latent shapes differ".into()
    })?;
    if cfg.batch_size == 0 || cfg.pool_images == 0 || cfg.variants_per_image == 0 {
        return Err(Error::Config("fine-tuning sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shape = codec.latent_shape();

    let pool = generate(codec, backend, cfg, cfg.pool_images, &mut rng)?;
    let mut attacked = Vec::with_capacity(cfg.pool_images * cfg.variants_per_image);
    let mut messages = Vec::with_capacity(attacked.capacity());
    for (img, m) in pool.images.iter().zip(&pool.messages) {
        for _ in 0..cfg.variants_per_image {
            let spec = if rng.random_bool(cfg.clean_fraction) {
                None
            } else {
                pooled_attack(&cfg.attack_pool, &mut rng)
            };
            attacked.push(match spec {
                Some(s) => apply_attack(img, &s)?,
                None => img.clone(),
            });
            messages.push(m.clone());
        }
    }
    let mut latents = Vec::with_capacity(attacked.len());
    for chunk in attacked.chunks(64) {
        latents.extend(invert_batch(backend, chunk, cfg.inversion_steps)?);
    }
    drop(attacked);
    let direct = (cfg.direct_fraction * latents.len() as f64).round() as usize;
    for _ in 0..direct {
        let m = BitMessage::random(codec.k(), &mut rng);
        let noise = LatentTensor::randn(shape, &mut rng);
        latents.push(encode_batch(std::slice::from_ref(&m), &[noise], codec)?.remove(0).0);
        messages.push(m);
    }

    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xe7a1);
    let held_out = generate(codec, backend, cfg, cfg.eval_images, &mut eval_rng)?;
    let (clean_before, direct_before) = end_to_end_accuracy(codec, backend, &held_out, cfg.inversion_steps)?;

    let mut tuned = codec.clone();
    let mut opt = Adam::new(T::lit(cfg.learning_rate));
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..latents.len())).collect();
        let zs: Vec<LatentTensor<T>> = idx.iter().map(|&i| latents[i].clone()).collect();
        let ms: Vec<BitMessage> = idx.iter().map(|&i| messages[i].clone()).collect();
        let (logits, cache) = tuned.decoder.forward_cached(&latent_rows(&zs), shape);
        let (bce, dlogits, acc) = batch_bce(&logits, &ms);
        if !bce.is_finite() {
            return Err(Error::Training {
                message: "decoder fine-tuning diverged".into(),
                metrics: format!("step={step} bce={bce}"),
            });
        }
        let mut grad = tuned.decoder.zeros_like();
        tuned.decoder.backward(&cache, shape, &dlogits, &mut grad);
        clip_grad_norm(&mut grad, T::lit(10.0));
        opt.step(&mut tuned.decoder, &grad);
        log.push(FinetuneLogEntry {
            step,
            bce,
            bit_accuracy: acc,
        });
    }

    let (clean_after, direct_after) = end_to_end_accuracy(&tuned, backend, &held_out, cfg.inversion_steps)?;
    let report = FinetuneReport {
        examples: latents.len(),
        log,
        clean_before,
        clean_after,
        direct_before,
        direct_after,
    };
    if clean_after < clean_before - cfg.max_clean_drop || direct_after < direct_before - cfg.max_clean_drop {
        return Err(Error::Training {
            message: "fine-tuning degraded the clean path".into(),
            metrics: format!(
                "chain {clean_before:.4} -> {clean_after:.4}, direct {direct_before:.4} -> {direct_after:.4}"
            ),
        });
    }
    Ok((tuned, report))
}
