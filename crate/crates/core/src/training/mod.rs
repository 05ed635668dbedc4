//! Codec pretraining, attack-hardened decoder fine-tuning, watermark
//! embedding/extraction and fidelity evaluation.

mod embed;
mod fidelity;
mod finetune;
mod pretrain;

pub use embed::{embed, embed_batch, watermark_noise, WatermarkPipeline};
pub use fidelity::{evaluate_fidelity, FidelityConfig, FidelityReport, MetricDelta, QualityMetric};
pub use finetune::{finetune_decoder, FinetuneConfig, FinetuneLogEntry, FinetuneReport};
pub use pretrain::{codec_statistics, pretrain_codec, CodecStatistics, PretrainConfig, PretrainLogEntry, PretrainReport};

use ndarray::Array2;

use crate::message::BitMessage;
use crate::scalar::{sigmoid, Scalar};

/// Summed-over-bits BCE averaged over the batch, its gradient with respect
/// to the logits, and the fraction of correct hard decisions.
pub(crate) fn batch_bce<T: Scalar>(logits: &Array2<T>, messages: &[BitMessage]) -> (f64, Array2<T>, f64) {
    let b = logits.nrows() as f64;
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (r, m) in messages.iter().enumerate() {
        for (i, &bit) in m.bits().iter().enumerate() {
            let l = logits[[r, i]];
            let p = sigmoid(l).as_f64().clamp(1e-7, 1.0 - 1e-7);
            let y = bit as f64;
            loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            grad[[r, i]] = T::lit((sigmoid(l).as_f64() - y) / b);
            if (l > T::zero()) == (bit == 1) {
                correct += 1;
            }
        }
    }
    let bits = logits.len().max(1) as f64;
    (loss / b, grad, correct as f64 / bits)
}

/// Mean fraction of agreeing bits.
pub(crate) fn mean_bit_accuracy(expected: &[BitMessage], got: &[BitMessage]) -> f64 {
    let total: usize = expected.iter().map(|m| m.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let agree: usize = expected
        .iter()
        .zip(got)
        .map(|(a, b)| a.len() - a.hamming(b).unwrap_or(a.len()))
        .sum();
    agree as f64 / total as f64
}
