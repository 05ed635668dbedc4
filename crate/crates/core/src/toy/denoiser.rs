//! Small residual convolutional noise predictor with timestep and class
//! conditioning, and its training loop.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{ensure_contract, Error, Result};
use crate::nn::{
    add_per_channel, clip_grad_norm, impl_parameters, silu, silu_backward, sum_per_channel, Adam,
    Conv2d, ConvGeometry, Dense, Embedding, Parameters,
};
use crate::scalar::Scalar;
use crate::tensor::{LatentShape, LatentTensor};

const TIME_FEATURES: usize = 32;

/// Sinusoidal features of the (integer) timestep.
fn time_features<T: Scalar>(ts: &[usize]) -> Array2<T> {
    let half = TIME_FEATURES / 2;
    Array2::from_shape_fn((ts.len(), TIME_FEATURES), |(b, j)| {
        let freq = (-(1000f64).ln() * (j % half) as f64 / half as f64).exp();
        let arg = ts[b] as f64 * freq;
        T::lit(if j < half { arg.sin() } else { arg.cos() })
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
}

impl_parameters!(ResBlock { conv1, conv2 });

struct BlockCache<T> {
    input: Array2<T>,
    p1: Array2<T>,
    q1: Array2<T>,
    p2: Array2<T>,
}

impl<T: Scalar> ResBlock<T> {
    fn forward(&self, h: &Array2<T>, hw: (usize, usize)) -> (Array2<T>, BlockCache<T>) {
        let p1 = silu(h);
        let q1 = self.conv1.forward(&p1, hw);
        let p2 = silu(&q1);
        let q2 = self.conv2.forward(&p2, hw);
        (
            h + &q2,
            BlockCache {
                input: h.clone(),
                p1,
                q1,
                p2,
            },
        )
    }

    fn backward(&self, c: &BlockCache<T>, hw: (usize, usize), dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let dp2 = self.conv2.backward(&c.p2, hw, dy, &mut grad.conv2);
        let dq1 = silu_backward(&c.q1, &dp2);
        let dp1 = self.conv1.backward(&c.p1, hw, &dq1, &mut grad.conv1);
        dy + &silu_backward(&c.input, &dp1)
    }
}

/// Noise prediction network `eps_theta(x_t, t, c)`.
///
/// The class table has one extra row, the last, used for the unconditional
/// branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser<T> {
    shape: LatentShape,
    pub time1: Dense<T>,
    pub time2: Dense<T>,
    pub class_embedding: Embedding<T>,
    pub conv_in: Conv2d<T>,
    pub blocks: Vec<ResBlock<T>>,
    pub conv_out: Conv2d<T>,
}

impl<T: Scalar> Parameters<T> for ToyDenoiser<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut v = self.time1.tensors();
        v.extend(self.time2.tensors());
        v.extend(self.class_embedding.tensors());
        v.extend(self.conv_in.tensors());
        v.extend(self.blocks.tensors());
        v.extend(self.conv_out.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.time1.tensors_mut();
        v.extend(self.time2.tensors_mut());
        v.extend(self.class_embedding.tensors_mut());
        v.extend(self.conv_in.tensors_mut());
        v.extend(self.blocks.tensors_mut());
        v.extend(self.conv_out.tensors_mut());
        v
    }
}

/// Architecture hyperparameters; also stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub shape: LatentShape,
    pub channels: usize,
    pub blocks: usize,
    pub num_classes: usize,
}

struct Cache<T> {
    tfeat: Array2<T>,
    u1: Array2<T>,
    au: Array2<T>,
    x: Array2<T>,
    blocks: Vec<BlockCache<T>>,
    h_last: Array2<T>,
    a_last: Array2<T>,
}

impl<T: Scalar> ToyDenoiser<T> {
    pub fn new<R: Rng + ?Sized>(arch: DenoiserArch, rng: &mut R) -> Self {
        let c = arch.channels;
        let lc = arch.shape.channels;
        Self {
            shape: arch.shape,
            time1: Dense::new(TIME_FEATURES, c, 1.0, rng),
            time2: Dense::new(c, c, 1.0, rng),
            class_embedding: Embedding::new(arch.num_classes + 1, c, 0.1, rng),
            conv_in: Conv2d::new(ConvGeometry::same(lc, c, 3), 1.0, rng),
            blocks: (0..arch.blocks)
                .map(|_| ResBlock {
                    conv1: Conv2d::new(ConvGeometry::same(c, c, 3), 1.0, rng),
                    conv2: Conv2d::new(ConvGeometry::same(c, c, 3), 0.5, rng),
                })
                .collect(),
            conv_out: Conv2d::new(ConvGeometry::same(c, lc, 3), 0.1, rng),
        }
    }

    pub fn arch(&self) -> DenoiserArch {
        DenoiserArch {
            shape: self.shape,
            channels: self.conv_in.geometry.out_channels,
            blocks: self.blocks.len(),
            num_classes: self.class_embedding.num_ids() - 1,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_embedding.num_ids() - 1
    }

    /// Row of the class table used for the unconditional branch.
    pub fn null_id(&self) -> usize {
        self.num_classes()
    }

    fn hw(&self) -> (usize, usize) {
        (self.shape.height, self.shape.width)
    }

    fn forward_cached(&self, x: &Array2<T>, ts: &[usize], ids: &[usize]) -> (Array2<T>, Cache<T>) {
        let hw = self.hw();
        let tfeat = time_features::<T>(ts);
        let u1 = self.time1.forward(&tfeat);
        let au = silu(&u1);
        let mut cond = self.time2.forward(&au);
        cond += &self.class_embedding.forward(ids);
        let mut h = self.conv_in.forward(x, hw);
        add_per_channel(&mut h, &cond, self.shape.spatial());
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&h, hw);
            caches.push(cache);
            h = next;
        }
        let a_last = silu(&h);
        let out = self.conv_out.forward(&a_last, hw);
        (
            out,
            Cache {
                tfeat,
                u1,
                au,
                x: x.clone(),
                blocks: caches,
                h_last: h,
                a_last,
            },
        )
    }

    fn backward(&self, cache: &Cache<T>, ts_ids: &[usize], dy: &Array2<T>, grad: &mut Self) {
        let hw = self.hw();
        let da = self.conv_out.backward(&cache.a_last, hw, dy, &mut grad.conv_out);
        let mut dh = silu_backward(&cache.h_last, &da);
        for (block, (c, g)) in self
            .blocks
            .iter()
            .zip(cache.blocks.iter().zip(grad.blocks.iter_mut()))
            .rev()
        {
            dh = block.backward(c, hw, &dh, g);
        }
        let dcond = sum_per_channel(&dh, self.conv_in.geometry.out_channels, self.shape.spatial());
        self.conv_in.backward(&cache.x, hw, &dh, &mut grad.conv_in);
        self.class_embedding.backward(ts_ids, &dcond, &mut grad.class_embedding);
        let dau = self.time2.backward(&cache.au, &dcond, &mut grad.time2);
        let du1 = silu_backward(&cache.u1, &dau);
        self.time1.backward(&cache.tfeat, &du1, &mut grad.time1);
    }

    /// Predicts noise for a batch `(n, numel)` of latents at per-row
    /// timesteps, with class ids where `null_id()` means unconditional.
    pub fn forward(&self, x: &Array2<T>, ts: &[usize], ids: &[usize]) -> Array2<T> {
        self.forward_cached(x, ts, ids).0
    }
}

pub(crate) fn latents_to_rows<T: Scalar>(xs: &[&LatentTensor<T>]) -> Array2<T> {
    let width = xs.first().map_or(0, |x| x.len());
    let mut data = Vec::with_capacity(xs.len() * width);
    for x in xs {
        data.extend_from_slice(x.as_slice());
    }
    Array2::from_shape_vec((xs.len(), width), data).expect("uniform latent size")
}

pub(crate) fn rows_to_latents<T: Scalar>(rows: &Array2<T>, shape: LatentShape) -> Vec<LatentTensor<T>> {
    rows.rows()
        .into_iter()
        .map(|r| LatentTensor::from_vec_unchecked(shape, r.to_vec()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub blocks: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of replacing the class with the unconditional id.
    pub cond_dropout: f64,
    /// Training fails unless the mean loss over the final tenth of the run
    /// is below this value.
    pub loss_target: f64,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            blocks: 2,
            steps: 3000,
            batch_size: 32,
            learning_rate: 2e-3,
            cond_dropout: 0.2,
            loss_target: 0.8,
            seed: 23,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserLogEntry {
    pub step: usize,
    pub loss: f64,
}

/// Loss curve and summary of a denoiser training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserTrainingLog {
    /// Loss of the freshly initialised network on the first batch.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub entries: Vec<DenoiserLogEntry>,
}

/// Fits `eps_theta` by regressing the injected noise at uniformly drawn
/// timesteps, with classifier-free condition dropout.
pub fn train_toy_denoiser<T: Scalar>(
    latents: &[LatentTensor<T>],
    labels: &[usize],
    num_classes: usize,
    sched: &NoiseSchedule<T>,
    cfg: &DenoiserConfig,
) -> Result<(ToyDenoiser<T>, DenoiserTrainingLog)> {
    ensure_contract(!latents.is_empty() && latents.len() == labels.len(), || {
        "denoiser training needs one label per latent".into()
    })?;
    ensure_contract(labels.iter().all(|&l| l < num_classes), || "label out of range".into())?;
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("denoiser steps and batch size must be positive".into()));
    }
    let shape = latents[0].shape();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let arch = DenoiserArch {
        shape,
        channels: cfg.channels,
        blocks: cfg.blocks,
        num_classes,
    };
    let mut model = ToyDenoiser::<T>::new(arch, &mut rng);
    let mut opt = Adam::new(T::lit(cfg.learning_rate));
    let t_max = sched.num_train_steps();
    let mut entries = Vec::with_capacity(cfg.steps);
    let mut initial_loss = f64::NAN;

    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..latents.len())).collect();
        let ts: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(1..=t_max)).collect();
        let ids: Vec<usize> = idx
            .iter()
            .map(|&i| {
                if rng.random_bool(cfg.cond_dropout) {
                    model.null_id()
                } else {
                    labels[i]
                }
            })
            .collect();
        let numel = shape.numel();
        let eps = Array2::from_shape_fn((cfg.batch_size, numel), |_| T::sample_normal(&mut rng));
        let x0 = latents_to_rows(&idx.iter().map(|&i| &latents[i]).collect::<Vec<_>>());
        let mut xt = x0;
        for (b, mut row) in xt.rows_mut().into_iter().enumerate() {
            let a = sched.alpha_bar(ts[b]).sqrt();
            let s = sched.sigma(ts[b]);
            row.zip_mut_with(&eps.row(b), |x, &e| *x = a * *x + s * e);
        }

        let (pred, cache) = model.forward_cached(&xt, &ts, &ids);
        let diff = &pred - &eps;
        let n = diff.len() as f64;
        let loss = diff.iter().map(|d| d.as_f64().powi(2)).sum::<f64>() / n;
        if !loss.is_finite() {
            return Err(Error::Training {
                message: "denoiser loss diverged".into(),
                metrics: format!("step={step} loss={loss}"),
            });
        }
        if step == 0 {
            initial_loss = loss;
        }
        let dy = diff.mapv(|d| d * T::lit(2.0 / n));
        let mut grad = model.zeros_like();
        model.backward(&cache, &ids, &dy, &mut grad);
        clip_grad_norm(&mut grad, T::lit(1.0));
        // cosine decay to a tenth of the base rate
        let progress = step as f64 / cfg.steps as f64;
        let lr = cfg.learning_rate * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()));
        opt.lr = T::lit(lr);
        opt.step(&mut model, &grad);
        entries.push(DenoiserLogEntry { step, loss });
    }

    let tail = (cfg.steps / 10).max(1);
    let final_loss = entries.iter().rev().take(tail).map(|e| e.loss).sum::<f64>() / tail as f64;
    if !(final_loss < cfg.loss_target) {
        return Err(Error::Training {
            message: "denoiser did not reach its loss target".into(),
            metrics: format!("final_loss={final_loss:.4} target={}", cfg.loss_target),
        });
    }
    Ok((
        model,
        DenoiserTrainingLog {
            initial_loss,
            final_loss,
            entries,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::ScheduleKind;

    fn tiny_arch() -> DenoiserArch {
        DenoiserArch {
            shape: LatentShape::new(2, 4, 4),
            channels: 4,
            blocks: 1,
            num_classes: 2,
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = ToyDenoiser::<f64>::new(tiny_arch(), &mut rng);
        let x = Array2::from_elem((3, 32), 0.3);
        let y = net.forward(&x, &[1, 500, 1000], &[0, 1, 2]);
        assert_eq!(y.dim(), (3, 32));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = ToyDenoiser::<f64>::new(tiny_arch(), &mut rng);
        let x = Array2::from_shape_fn((2, 32), |_| rng.random_range(-1.0..1.0));
        let r = Array2::from_shape_fn((2, 32), |_| rng.random_range(-1.0..1.0));
        let (ts, ids) = ([7usize, 300], [1usize, 2]);
        let loss = |m: &ToyDenoiser<f64>| (m.forward(&x, &ts, &ids) * &r).sum();
        let (_, cache) = net.forward_cached(&x, &ts, &ids);
        let mut grad = net.zeros_like();
        net.backward(&cache, &ids, &r, &mut grad);
        let analytic: Vec<f64> = grad.tensors().iter().flat_map(|t| t.iter().copied()).collect();
        let total = analytic.len();
        let h = 1e-6;
        for k in (0..total).step_by(total / 40) {
            let mut plus = net.clone();
            let mut minus = net.clone();
            bump(&mut plus, k, h);
            bump(&mut minus, k, -h);
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!(
                (numeric - analytic[k]).abs() < 1e-6 * (1.0 + numeric.abs()),
                "param {k}: {numeric} vs {}",
                analytic[k]
            );
        }
    }

    fn bump(m: &mut ToyDenoiser<f64>, mut k: usize, h: f64) {
        for t in m.tensors_mut() {
            if k < t.len() {
                t[k] += h;
                return;
            }
            k -= t.len();
        }
    }

    #[test]
    fn training_beats_untrained_baseline_and_is_deterministic() {
        let shape = LatentShape::new(2, 4, 4);
        let latents: Vec<LatentTensor<f32>> = (0..32)
            .map(|i| LatentTensor::filled(shape, if i % 2 == 0 { 1.0 } else { -1.0 }))
            .collect();
        let labels: Vec<usize> = (0..32).map(|i| i % 2).collect();
        let sched = NoiseSchedule::new(ScheduleKind::LinearBeta, 100).unwrap();
        let cfg = DenoiserConfig {
            channels: 8,
            blocks: 1,
            steps: 150,
            batch_size: 16,
            loss_target: 1.0,
            ..Default::default()
        };
        let (a, log) = train_toy_denoiser(&latents, &labels, 2, &sched, &cfg).unwrap();
        assert!((log.initial_loss - 1.0).abs() < 0.3, "untrained loss {}", log.initial_loss);
        assert!(log.final_loss < log.initial_loss);
        let (b, _) = train_toy_denoiser(&latents, &labels, 2, &sched, &cfg).unwrap();
        assert_eq!(a.to_blob(), b.to_blob());
    }
}
