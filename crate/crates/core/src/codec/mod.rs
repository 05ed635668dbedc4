//! Message-to-latent watermark encoder with reparameterised sampling, the
//! latent-to-message decoder, and their losses.

mod losses;
mod model;

pub use losses::{bce_loss, joint_loss, kl_loss, LossWeights};
pub use model::{hard_bits, CodecArch, CodecDecoder, CodecEncoder, CodecParams};
pub(crate) use model::{latent_rows, message_rows};

use crate::error::{ensure_contract, Result};
use crate::message::BitMessage;
use crate::scalar::Scalar;
use crate::tensor::LatentTensor;

/// `(z, mu, logvar)` for one message.
pub type Encoded<T> = (LatentTensor<T>, LatentTensor<T>, LatentTensor<T>);

/// Samples a watermarked latent `z = mu + exp(logvar / 2) * noise`.
pub fn encode_message<T: Scalar>(
    m: &BitMessage,
    noise: &LatentTensor<T>,
    params: &CodecParams<T>,
) -> Result<Encoded<T>> {
    Ok(encode_batch(std::slice::from_ref(m), std::slice::from_ref(noise), params)?.remove(0))
}

/// Batched [`encode_message`].
pub fn encode_batch<T: Scalar>(
    messages: &[BitMessage],
    noise: &[LatentTensor<T>],
    params: &CodecParams<T>,
) -> Result<Vec<Encoded<T>>> {
    ensure_contract(messages.len() == noise.len(), || {
        "one noise tensor per message is required".into()
    })?;
    for (m, n) in messages.iter().zip(noise) {
        params.check_message(m)?;
        params.check_latent(n)?;
    }
    if messages.is_empty() {
        return Ok(Vec::new());
    }
    let (mu, logvar) = params.encoder.forward(&message_rows(messages), params.latent_shape());
    let shape = params.latent_shape();
    Ok((0..messages.len())
        .map(|b| {
            let mu_b = LatentTensor::from_vec_unchecked(shape, mu.row(b).to_vec());
            let lv_b = LatentTensor::from_vec_unchecked(shape, logvar.row(b).to_vec());
            let z = LatentTensor::from_vec_unchecked(
                shape,
                mu_b.as_slice()
                    .iter()
                    .zip(lv_b.as_slice())
                    .zip(noise[b].as_slice())
                    .map(|((&m, &lv), &e)| m + (lv * T::lit(0.5)).exp() * e)
                    .collect(),
            );
            (z, mu_b, lv_b)
        })
        .collect())
}

/// Bit logits for a latent; bit `i` is set when `logits[i] > 0`.
pub fn decode_latent<T: Scalar>(z: &LatentTensor<T>, params: &CodecParams<T>) -> Result<Vec<T>> {
    Ok(decode_batch(std::slice::from_ref(z), params)?.remove(0))
}

/// Batched [`decode_latent`].
pub fn decode_batch<T: Scalar>(zs: &[LatentTensor<T>], params: &CodecParams<T>) -> Result<Vec<Vec<T>>> {
    for z in zs {
        params.check_latent(z)?;
        z.check_finite("latent")?;
    }
    if zs.is_empty() {
        return Ok(Vec::new());
    }
    let logits = params.decoder.forward(&model::latent_rows(zs), params.latent_shape());
    Ok(logits.rows().into_iter().map(|r| r.to_vec()).collect())
}

/// Hard-decision bits for a batch of latents.
pub fn decode_bits<T: Scalar>(zs: &[LatentTensor<T>], params: &CodecParams<T>) -> Result<Vec<BitMessage>> {
    Ok(decode_batch(zs, params)?.iter().map(|l| hard_bits(l)).collect())
}
