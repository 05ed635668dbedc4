use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_contract, Result};
use crate::message::BitMessage;
use crate::nn::{impl_parameters, silu, silu_backward, Conv2d, ConvGeometry, ConvTranspose2d, Dense, Parameters};
use crate::scalar::Scalar;
use crate::tensor::{LatentShape, LatentTensor};

const LOGVAR_LIMIT: f64 = 30.0;

const fn halving(cin: usize, cout: usize) -> ConvGeometry {
    ConvGeometry {
        in_channels: cin,
        out_channels: cout,
        kernel: 4,
        stride: 2,
        padding: 1,
    }
}

/// Widths of the codec networks; stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecArch {
    pub hidden: usize,
    pub coarse_channels: usize,
    pub fine_channels: usize,
}

impl Default for CodecArch {
    fn default() -> Self {
        Self {
            hidden: 256,
            coarse_channels: 32,
            fine_channels: 32,
        }
    }
}

/// Message bits to per-element mean and log-variance.
///
/// Two dense layers lift the message to a half-resolution feature map, a
/// transposed convolution brings it to latent resolution and a 3x3
/// convolution emits both statistics. A linear skip from the message adds a
/// direct path.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecEncoder<T> {
    pub dense1: Dense<T>,
    pub dense2: Dense<T>,
    pub up: ConvTranspose2d<T>,
    pub out: Conv2d<T>,
    pub skip: Dense<T>,
}

impl_parameters!(CodecEncoder { dense1, dense2, up, out, skip });

/// Latent to bit logits, mirroring the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecDecoder<T> {
    pub conv_in: Conv2d<T>,
    pub down: Conv2d<T>,
    pub dense1: Dense<T>,
    pub dense2: Dense<T>,
    pub skip: Dense<T>,
}

impl_parameters!(CodecDecoder { conv_in, down, dense1, dense2, skip });

pub(crate) struct EncoderCache<T> {
    input: Array2<T>,
    e1: Array2<T>,
    a1: Array2<T>,
    e2: Array2<T>,
    a2: Array2<T>,
    u: Array2<T>,
    au: Array2<T>,
}

pub(crate) struct DecoderCache<T> {
    input: Array2<T>,
    d1: Array2<T>,
    b1: Array2<T>,
    d2: Array2<T>,
    b2: Array2<T>,
    d3: Array2<T>,
    b3: Array2<T>,
}

fn half(shape: LatentShape) -> (usize, usize) {
    (shape.height / 2, shape.width / 2)
}

fn full(shape: LatentShape) -> (usize, usize) {
    (shape.height, shape.width)
}

impl<T: Scalar> CodecEncoder<T> {
    fn new<R: Rng + ?Sized>(k: usize, shape: LatentShape, arch: CodecArch, rng: &mut R) -> Self {
        let (hh, hw) = half(shape);
        Self {
            dense1: Dense::new(k, arch.hidden, 1.0, rng),
            dense2: Dense::new(arch.hidden, arch.coarse_channels * hh * hw, 1.0, rng),
            up: ConvTranspose2d::new(halving(arch.coarse_channels, arch.fine_channels), 1.0, rng),
            out: Conv2d::new(ConvGeometry::same(arch.fine_channels, 2 * shape.channels, 3), 0.1, rng),
            skip: Dense::new(k, 2 * shape.numel(), 0.1, rng),
        }
    }

    pub(crate) fn forward_cached(&self, msg: &Array2<T>, shape: LatentShape) -> (Array2<T>, EncoderCache<T>) {
        let e1 = self.dense1.forward(msg);
        let a1 = silu(&e1);
        let e2 = self.dense2.forward(&a1);
        let a2 = silu(&e2);
        let u = self.up.forward(&a2, half(shape));
        let au = silu(&u);
        let mut o = self.out.forward(&au, full(shape));
        o += &self.skip.forward(msg);
        let lim = T::lit(LOGVAR_LIMIT);
        let n = shape.numel();
        o.slice_mut(s![.., n..]).mapv_inplace(|v| v.max(-lim).min(lim));
        (
            o,
            EncoderCache {
                input: msg.clone(),
                e1,
                a1,
                e2,
                a2,
                u,
                au,
            },
        )
    }

    /// `(mu, logvar)` rows for a batch of sign-encoded messages.
    pub fn forward(&self, msg: &Array2<T>, shape: LatentShape) -> (Array2<T>, Array2<T>) {
        let (o, _) = self.forward_cached(msg, shape);
        let n = shape.numel();
        (o.slice(s![.., ..n]).to_owned(), o.slice(s![.., n..]).to_owned())
    }

    /// Backpropagates `d(mu, logvar)` concatenated per row.
    pub(crate) fn backward(&self, c: &EncoderCache<T>, shape: LatentShape, d_out: &Array2<T>, grad: &mut Self) {
        self.skip.backward(&c.input, d_out, &mut grad.skip);
        let dau = self.out.backward(&c.au, full(shape), d_out, &mut grad.out);
        let du = silu_backward(&c.u, &dau);
        let da2 = self.up.backward(&c.a2, half(shape), &du, &mut grad.up);
        let de2 = silu_backward(&c.e2, &da2);
        let da1 = self.dense2.backward(&c.a1, &de2, &mut grad.dense2);
        let de1 = silu_backward(&c.e1, &da1);
        self.dense1.backward(&c.input, &de1, &mut grad.dense1);
    }
}

impl<T: Scalar> CodecDecoder<T> {
    fn new<R: Rng + ?Sized>(k: usize, shape: LatentShape, arch: CodecArch, rng: &mut R) -> Self {
        let (hh, hw) = half(shape);
        Self {
            conv_in: Conv2d::new(ConvGeometry::same(shape.channels, arch.fine_channels, 3), 1.0, rng),
            down: Conv2d::new(halving(arch.fine_channels, arch.coarse_channels), 1.0, rng),
            dense1: Dense::new(arch.coarse_channels * hh * hw, arch.hidden, 1.0, rng),
            dense2: Dense::new(arch.hidden, k, 1.0, rng),
            skip: Dense::new(shape.numel(), k, 1.0, rng),
        }
    }

    pub(crate) fn forward_cached(&self, z: &Array2<T>, shape: LatentShape) -> (Array2<T>, DecoderCache<T>) {
        let d1 = self.conv_in.forward(z, full(shape));
        let b1 = silu(&d1);
        let d2 = self.down.forward(&b1, full(shape));
        let b2 = silu(&d2);
        let d3 = self.dense1.forward(&b2);
        let b3 = silu(&d3);
        let mut logits = self.dense2.forward(&b3);
        logits += &self.skip.forward(z);
        (
            logits,
            DecoderCache {
                input: z.clone(),
                d1,
                b1,
                d2,
                b2,
                d3,
                b3,
            },
        )
    }

    pub fn forward(&self, z: &Array2<T>, shape: LatentShape) -> Array2<T> {
        self.forward_cached(z, shape).0
    }

    /// Returns the gradient with respect to the input latents.
    pub(crate) fn backward(&self, c: &DecoderCache<T>, shape: LatentShape, dlogits: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let mut dz = self.skip.backward(&c.input, dlogits, &mut grad.skip);
        let db3 = self.dense2.backward(&c.b3, dlogits, &mut grad.dense2);
        let dd3 = silu_backward(&c.d3, &db3);
        let db2 = self.dense1.backward(&c.b2, &dd3, &mut grad.dense1);
        let dd2 = silu_backward(&c.d2, &db2);
        let db1 = self.down.backward(&c.b1, full(shape), &dd2, &mut grad.down);
        let dd1 = silu_backward(&c.d1, &db1);
        dz += &self.conv_in.backward(&c.input, full(shape), &dd1, &mut grad.conv_in);
        dz
    }
}

/// Trained encoder/decoder pair for `k`-bit messages.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecParams<T> {
    k: usize,
    shape: LatentShape,
    arch: CodecArch,
    pub encoder: CodecEncoder<T>,
    pub decoder: CodecDecoder<T>,
}

impl<T: Scalar> Parameters<T> for CodecParams<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut v = self.encoder.tensors();
        v.extend(self.decoder.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.decoder.tensors_mut());
        v
    }
}

impl<T: Scalar> CodecParams<T> {
    pub fn new<R: Rng + ?Sized>(k: usize, shape: LatentShape, arch: CodecArch, rng: &mut R) -> Result<Self> {
        ensure_contract(k > 0, || "message length must be positive".into())?;
        ensure_contract(shape.height.is_multiple_of(2) && shape.width.is_multiple_of(2) && shape.height > 0, || {
            format!("codec needs even latent height and width, got {shape}")
        })?;
        Ok(Self {
            k,
            shape,
            arch,
            encoder: CodecEncoder::new(k, shape, arch, rng),
            decoder: CodecDecoder::new(k, shape, arch, rng),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn latent_shape(&self) -> LatentShape {
        self.shape
    }

    pub fn arch(&self) -> CodecArch {
        self.arch
    }

    pub(crate) fn check_message(&self, m: &BitMessage) -> Result<()> {
        ensure_contract(m.len() == self.k, || {
            format!("message has {} bits, codec expects {}", m.len(), self.k)
        })
    }

    pub(crate) fn check_latent(&self, z: &LatentTensor<T>) -> Result<()> {
        ensure_contract(z.shape() == self.shape, || {
            format!("latent has shape {}, codec expects {}", z.shape(), self.shape)
        })
    }
}

/// Messages as rows of `+1` / `-1`.
pub(crate) fn message_rows<T: Scalar>(messages: &[BitMessage]) -> Array2<T> {
    let k = messages.first().map_or(0, |m| m.len());
    Array2::from_shape_fn((messages.len(), k), |(b, i)| {
        if messages[b].bit(i) {
            T::one()
        } else {
            -T::one()
        }
    })
}

pub(crate) fn latent_rows<T: Scalar>(zs: &[LatentTensor<T>]) -> Array2<T> {
    let n = zs.first().map_or(0, |z| z.len());
    let mut data = Vec::with_capacity(zs.len() * n);
    for z in zs {
        data.extend_from_slice(z.as_slice());
    }
    Array2::from_shape_vec((zs.len(), n), data).expect("uniform latent size")
}

/// Bit `i` is 1 exactly when `logits[i] > 0`.
pub fn hard_bits<T: Scalar>(logits: &[T]) -> BitMessage {
    BitMessage::from_bools(logits.iter().map(|&l| l > T::zero()))
}
