use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{encode_batch, CodecParams};
use crate::diffusion::{sample_batch, DiffusionBackend, GuidanceConfig};
use crate::error::{ensure_contract, Result};
use crate::message::BitMessage;
use crate::scalar::Scalar;
use crate::tensor::{Image, LatentTensor};

/// A no-reference image quality score computed over a set of images.
///
/// Implementations wrap external scorers; none ship with the crate.
pub trait QualityMetric: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, images: &[Image]) -> Result<f64>;
}

/// Metrics that are always computed.
pub const BUILTIN_METRICS: [&str; 4] = ["latent_mean", "latent_var", "image_mean", "image_std"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FidelityConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub guidance: GuidanceConfig,
    /// Largest acceptable absolute difference for each metric.
    pub epsilon: f64,
    /// Names of external metrics to compute in addition to the built-ins.
    pub external_metrics: Vec<String>,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        Self {
            n_samples: 64,
            seed: 31,
            guidance: GuidanceConfig::default(),
            epsilon: 0.1,
            external_metrics: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub watermarked: f64,
    pub reference: f64,
    pub delta: f64,
    pub within_epsilon: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub n_samples: usize,
    pub epsilon: f64,
    pub deltas: Vec<MetricDelta>,
    pub warnings: Vec<String>,
}

impl FidelityReport {
    pub fn all_within_epsilon(&self) -> bool {
        self.deltas.iter().all(|d| d.within_epsilon)
    }

    pub fn delta(&self, metric: &str) -> Option<&MetricDelta> {
        self.deltas.iter().find(|d| d.metric == metric)
    }
}

fn moments(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
    for v in values {
        n += 1;
        sum += v;
        sq += v * v;
    }
    if n < 2 {
        return (sum, 0.0);
    }
    let mean = sum / n as f64;
    (mean, (sq - n as f64 * mean * mean) / (n as f64 - 1.0))
}

/// Compares watermarked generations against generations from plain Gaussian
/// starting latents under the same guidance.
///
/// Latent moments are taken over all elements of the starting latents; image
/// moments over all pixels. External metrics listed in the config are looked
/// up among `adapters` by name; unknown names produce a warning and are
/// skipped.
pub fn evaluate_fidelity<T: Scalar, B: DiffusionBackend<T> + ?Sized>(
    codec: &CodecParams<T>,
    backend: &B,
    cfg: &FidelityConfig,
    adapters: &[&dyn QualityMetric],
) -> Result<FidelityReport> {
    let mut report = FidelityReport {
        n_samples: cfg.n_samples,
        epsilon: cfg.epsilon,
        deltas: Vec::new(),
        warnings: Vec::new(),
    };
    if cfg.n_samples == 0 {
        return Ok(report);
    }
    ensure_contract(codec.latent_shape() == backend.latent_shape(), || {
        "codec and backend latent shapes differ".into()
    })?;
    let shape = codec.latent_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let msgs: Vec<BitMessage> = (0..cfg.n_samples).map(|_| BitMessage::random(codec.k(), &mut rng)).collect();
    let noise: Vec<LatentTensor<T>> = (0..cfg.n_samples).map(|_| LatentTensor::randn(shape, &mut rng)).collect();
    let watermarked: Vec<LatentTensor<T>> = encode_batch(&msgs, &noise, codec)?.into_iter().map(|e| e.0).collect();
    let plain: Vec<LatentTensor<T>> = (0..cfg.n_samples).map(|_| LatentTensor::randn(shape, &mut rng)).collect();

    let wm_images = sample_batch(backend, &watermarked, &cfg.guidance)?;
    let plain_images = sample_batch(backend, &plain, &cfg.guidance)?;

    let latent_values = |zs: &[LatentTensor<T>]| -> (f64, f64) {
        moments(zs.iter().flat_map(|z| z.as_slice().iter().map(|v| v.as_f64())).collect::<Vec<_>>().into_iter())
    };
    let image_values = |imgs: &[Image]| -> (f64, f64) {
        moments(imgs.iter().flat_map(|i| i.as_slice().iter().map(|&v| v as f64)).collect::<Vec<_>>().into_iter())
    };
    let (wl_mean, wl_var) = latent_values(&watermarked);
    let (pl_mean, pl_var) = latent_values(&plain);
    let (wi_mean, wi_var) = image_values(&wm_images);
    let (pi_mean, pi_var) = image_values(&plain_images);

    let mut push = |metric: &str, watermarked: f64, reference: f64| {
        let delta = watermarked - reference;
        report.deltas.push(MetricDelta {
            metric: metric.to_string(),
            watermarked,
            reference,
            delta,
            within_epsilon: delta.abs() <= cfg.epsilon,
        });
    };
    push(BUILTIN_METRICS[0], wl_mean, pl_mean);
    push(BUILTIN_METRICS[1], wl_var, pl_var);
    push(BUILTIN_METRICS[2], wi_mean, pi_mean);
    push(BUILTIN_METRICS[3], wi_var.sqrt(), pi_var.sqrt());

    for name in &cfg.external_metrics {
        match adapters.iter().find(|a| a.name() == name) {
            Some(adapter) => {
                let w = adapter.score(&wm_images)?;
                let p = adapter.score(&plain_images)?;
                push(name, w, p);
            }
            None => report
                .warnings
                .push(format!("metric `{name}` skipped: no adapter registered")),
        }
    }
    Ok(report)
}
