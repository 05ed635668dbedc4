use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_bce, mean_bit_accuracy};
use crate::codec::{decode_bits, encode_batch, latent_rows, message_rows, CodecArch, CodecParams};
use crate::error::{Error, Result};
use crate::message::BitMessage;
use crate::nn::{clip_grad_norm, Adam, Parameters};
use crate::scalar::Scalar;
use crate::special::{ks_test_standard_normal, KsOutcome};
use crate::tensor::{LatentShape, LatentTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub k: usize,
    pub latent_shape: LatentShape,
    pub arch: CodecArch,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the message reconstruction loss.
    pub lambda1: f64,
    /// Final weight of the distribution loss, reached after
    /// `anneal_fraction * steps` steps of linear warm-up from zero.
    pub lambda2: f64,
    pub anneal_fraction: f64,
    /// Weight of the per-sample posterior KL, which keeps the sampling noise
    /// from collapsing.
    pub posterior_weight: f64,
    pub seed: u64,
    /// Size of the post-training evaluation (round-trip trials and latent
    /// draws for the moment and KS checks).
    pub eval_trials: usize,
    pub min_bit_accuracy: f64,
    /// KS significance level for the post-training check; 0 disables it.
    pub ks_significance: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            k: 48,
            latent_shape: LatentShape::new(4, 8, 8),
            arch: CodecArch::default(),
            steps: 2500,
            batch_size: 64,
            learning_rate: 1e-3,
            lambda1: 1.0,
            lambda2: 0.5,
            anneal_fraction: 0.5,
            posterior_weight: 1.0,
            seed: 17,
            eval_trials: 10_000,
            min_bit_accuracy: 0.99,
            ks_significance: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogEntry {
    pub step: usize,
    pub bce: f64,
    pub distribution: f64,
    pub posterior_kl: f64,
    pub lambda2: f64,
    pub bit_accuracy: f64,
}

/// Post-training measurements of a codec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecStatistics {
    pub trials: usize,
    pub clean_bit_accuracy: f64,
    /// Extremes over latent positions of the per-position mean and variance.
    pub mean_range: (f64, f64),
    pub var_range: (f64, f64),
    /// Mean of `exp(logvar / 2)` over all draws and positions.
    pub mean_sigma: f64,
    pub ks: KsOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub log: Vec<PretrainLogEntry>,
    pub statistics: CodecStatistics,
}

/// Sum over latent positions of `KL(N(m_i, v_i) || N(0, 1))` for the batch
/// moments of `z`, and its gradient with respect to `z`.
fn aggregate_kl<T: Scalar>(z: &Array2<T>) -> (f64, Array2<T>) {
    let b = z.nrows() as f64;
    let mut grad = Array2::zeros(z.dim());
    let mut loss = 0.0;
    for (i, col) in z.columns().into_iter().enumerate() {
        let m = col.iter().map(|v| v.as_f64()).sum::<f64>() / b;
        let v = (col.iter().map(|x| (x.as_f64() - m).powi(2)).sum::<f64>() / (b - 1.0)).max(1e-6);
        loss += 0.5 * (m * m + v - 1.0 - v.ln());
        for (r, x) in col.iter().enumerate() {
            grad[[r, i]] = T::lit(m / b + (1.0 - 1.0 / v) * (x.as_f64() - m) / (b - 1.0));
        }
    }
    (loss, grad)
}

fn draw_batch<T: Scalar>(
    k: usize,
    shape: LatentShape,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<BitMessage>, Vec<LatentTensor<T>>) {
    let msgs = (0..n).map(|_| BitMessage::random(k, rng)).collect();
    let noise = (0..n).map(|_| LatentTensor::randn(shape, rng)).collect();
    (msgs, noise)
}

/// Measures clean round-trip accuracy, per-position moments and the KS
/// statistic of `z` on `trials` seeded draws.
pub fn codec_statistics<T: Scalar>(codec: &CodecParams<T>, trials: usize, seed: u64) -> Result<CodecStatistics> {
    let shape = codec.latent_shape();
    let n = shape.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = vec![0.0f64; n];
    let mut sumsq = vec![0.0f64; n];
    let mut pool = Vec::with_capacity(trials);
    let mut sigma_sum = 0.0;
    let mut agree = 0.0;
    let chunk = 256;
    let mut done = 0;
    while done < trials {
        let size = chunk.min(trials - done);
        let (msgs, noise) = draw_batch::<T>(codec.k(), shape, size, &mut rng);
        let enc = encode_batch(&msgs, &noise, codec)?;
        let zs: Vec<LatentTensor<T>> = enc.iter().map(|e| e.0.clone()).collect();
        let bits = decode_bits(&zs, codec)?;
        agree += mean_bit_accuracy(&msgs, &bits) * size as f64;
        for (j, (z, _, lv)) in enc.iter().enumerate() {
            for (i, &v) in z.as_slice().iter().enumerate() {
                let v = v.as_f64();
                sum[i] += v;
                sumsq[i] += v * v;
            }
            sigma_sum += lv.as_slice().iter().map(|l| (l.as_f64() * 0.5).exp()).sum::<f64>() / n as f64;
            // one element per draw keeps the KS pool independent
            pool.push(z.as_slice()[(done + j) % n].as_f64());
        }
        done += size;
    }
    let t = trials.max(1) as f64;
    let means: Vec<f64> = sum.iter().map(|s| s / t).collect();
    let vars: Vec<f64> = sumsq.iter().zip(&means).map(|(q, m)| q / t - m * m).collect();
    let range = |v: &[f64]| {
        v.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
    };
    Ok(CodecStatistics {
        trials,
        clean_bit_accuracy: agree / t,
        mean_range: range(&means),
        var_range: range(&vars),
        mean_sigma: sigma_sum / t,
        ks: ks_test_standard_normal(&pool),
    })
}

/// Jointly trains the message encoder and decoder.
///
/// The objective combines the summed bit cross-entropy, a distribution term
/// matching the batch moments of every latent position to `N(0, 1)`, and a
/// small per-sample posterior KL. Fails with [`Error::Training`] when the
/// trained codec misses its accuracy or normality targets.
pub fn pretrain_codec<T: Scalar>(cfg: &PretrainConfig) -> Result<(CodecParams<T>, PretrainReport)> {
    if cfg.steps == 0 || cfg.batch_size < 2 {
        return Err(Error::Config("pretraining needs steps > 0 and batch size >= 2".into()));
    }
    let shape = cfg.latent_shape;
    let n = shape.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut codec = CodecParams::<T>::new(cfg.k, shape, cfg.arch, &mut rng)?;
    let mut opt = Adam::new(T::lit(cfg.learning_rate));
    let mut log = Vec::with_capacity(cfg.steps);
    let warmup = (cfg.anneal_fraction * cfg.steps as f64).max(1.0);
    let b = cfg.batch_size as f64;

    for step in 0..cfg.steps {
        let lambda2 = cfg.lambda2 * (step as f64 / warmup).min(1.0);
        let (msgs, noise) = draw_batch::<T>(cfg.k, shape, cfg.batch_size, &mut rng);
        let m_rows = message_rows::<T>(&msgs);
        let (out, ecache) = codec.encoder.forward_cached(&m_rows, shape);
        let eps = latent_rows(&noise);
        let mu = out.slice(s![.., ..n]).to_owned();
        let lv = out.slice(s![.., n..]).to_owned();
        let std = lv.mapv(|l| (l * T::lit(0.5)).exp());
        let z = &mu + &(&std * &eps);

        let (logits, dcache) = codec.decoder.forward_cached(&z, shape);
        let (bce, dlogits, acc) = batch_bce(&logits, &msgs);
        let mut grad = codec.zeros_like();
        let mut dz = codec
            .decoder
            .backward(&dcache, shape, &dlogits.mapv(|g| g * T::lit(cfg.lambda1)), &mut grad.decoder);

        let (dist, dagg) = aggregate_kl(&z);
        dz.scaled_add(T::lit(lambda2), &dagg);

        let mut posterior = 0.0;
        let mut d_out = Array2::<T>::zeros(out.dim());
        let pw = cfg.posterior_weight / (n as f64 * b);
        for r in 0..cfg.batch_size {
            for i in 0..n {
                let (m, l, e, s) = (mu[[r, i]], lv[[r, i]], eps[[r, i]], std[[r, i]]);
                let (mf, lf) = (m.as_f64(), l.as_f64());
                posterior += 0.5 * (mf * mf + lf.exp() - 1.0 - lf);
                let g = dz[[r, i]];
                d_out[[r, i]] = g + T::lit(pw * mf);
                d_out[[r, n + i]] = g * e * s * T::lit(0.5) + T::lit(pw * 0.5 * (lf.exp() - 1.0));
            }
        }
        posterior /= n as f64 * b;
        codec.encoder.backward(&ecache, shape, &d_out, &mut grad.encoder);
        clip_grad_norm(&mut grad, T::lit(10.0));
        opt.step(&mut codec, &grad);

        if !(bce.is_finite() && dist.is_finite()) {
            return Err(Error::Training {
                message: "codec pretraining diverged".into(),
                metrics: format!("step={step} bce={bce} distribution={dist}"),
            });
        }
        log.push(PretrainLogEntry {
            step,
            bce,
            distribution: dist,
            posterior_kl: posterior,
            lambda2,
            bit_accuracy: acc,
        });
    }

    let initial_loss = log.first().map_or(f64::NAN, |e| cfg.lambda1 * e.bce + e.lambda2 * e.distribution);
    let statistics = codec_statistics(&codec, cfg.eval_trials, cfg.seed ^ 0x5eed)?;
    let report = PretrainReport {
        initial_loss,
        log,
        statistics: statistics.clone(),
    };
    let ks_fail = cfg.ks_significance > 0.0 && statistics.ks.rejects(cfg.ks_significance);
    if statistics.clean_bit_accuracy < cfg.min_bit_accuracy || ks_fail {
        return Err(Error::Training {
            message: "codec missed its pretraining targets".into(),
            metrics: format!(
                "bit_accuracy={:.4} (target {}), ks_p={:.4} (significance {})",
                statistics.clean_bit_accuracy, cfg.min_bit_accuracy, statistics.ks.p_value, cfg.ks_significance
            ),
        });
    }
    Ok((codec, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_kl_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Array2::from_shape_fn((6, 3), |_| f64::sample_normal(&mut rng) * 1.3 + 0.2);
        let (_, g) = aggregate_kl(&z);
        let h = 1e-6;
        for r in 0..6 {
            for c in 0..3 {
                let mut zp = z.clone();
                zp[[r, c]] += h;
                let mut zm = z.clone();
                zm[[r, c]] -= h;
                let num = (aggregate_kl(&zp).0 - aggregate_kl(&zm).0) / (2.0 * h);
                assert!((num - g[[r, c]]).abs() < 1e-6, "{num} vs {}", g[[r, c]]);
            }
        }
    }

    #[test]
    fn aggregate_kl_vanishes_for_standardised_batches() {
        // two samples at -1/sqrt(2), 1/sqrt(2): mean 0, unbiased variance 1
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let z = Array2::from_shape_vec((2, 1), vec![-h, h]).unwrap();
        assert!(aggregate_kl(&z).0.abs() < 1e-12);
    }

    #[test]
    fn initial_loss_is_near_chance_level() {
        let cfg = PretrainConfig {
            k: 16,
            steps: 1,
            batch_size: 32,
            eval_trials: 64,
            min_bit_accuracy: 0.0,
            ks_significance: 0.0,
            ..Default::default()
        };
        let (_, report) = pretrain_codec::<f64>(&cfg).unwrap();
        let chance = 16.0 * 2f64.ln();
        assert!((report.initial_loss - chance).abs() < 0.3 * chance, "{}", report.initial_loss);
    }
}
