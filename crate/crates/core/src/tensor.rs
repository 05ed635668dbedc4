//! Latent arrays and pixel images.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_contract, Error, Result};
use crate::scalar::Scalar;

/// Channel-major dimensions of a latent array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn spatial(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for LatentShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A finite real-valued latent of shape `(channels, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor<T> {
    shape: LatentShape,
    data: Vec<T>,
}

impl<T: Scalar> LatentTensor<T> {
    /// Builds a latent, rejecting length mismatches and non-finite entries.
    pub fn new(shape: LatentShape, data: Vec<T>) -> Result<Self> {
        ensure_contract(data.len() == shape.numel(), || {
            format!(
                "latent data has {} elements but shape {} needs {}",
                data.len(),
                shape,
                shape.numel()
            )
        })?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericDomain(format!(
                "latent element {i} is not finite"
            )));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn from_vec_unchecked(shape: LatentShape, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Self { shape, data }
    }

    pub fn zeros(shape: LatentShape) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn filled(shape: LatentShape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    /// Standard-normal draw from the caller's RNG.
    pub fn randn<R: Rng + ?Sized>(shape: LatentShape, rng: &mut R) -> Self {
        let data = (0..shape.numel()).map(|_| T::sample_normal(rng)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Fails with a numeric-domain error if any element is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NumericDomain(format!("{what} produced non-finite values")))
        }
    }

    pub fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        ensure_contract(self.shape == other.shape, || {
            format!("{what}: shape {} does not match {}", self.shape, other.shape)
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination; shapes must already have been checked.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `a * self + b * other`.
    pub fn lincomb(&self, a: T, other: &Self, b: T) -> Self {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn cosine_similarity(&self, other: &Self) -> T {
        let denom = self.norm() * other.norm();
        if denom == T::zero() {
            T::zero()
        } else {
            self.dot(other) / denom
        }
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.data.iter().copied().sum::<T>() / T::lit(self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn cast<U: Scalar>(&self) -> LatentTensor<U> {
        LatentTensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Planar image with pixel values in `[0, 1]`.
///
/// Pixel data is stored in `f32` regardless of the latent scalar type; images
/// are an exchange format between the diffusion backend and the attack layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure_contract(data.len() == channels * height * width, || {
            format!(
                "image data has {} values, expected {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )
        })?;
        ensure_contract(channels > 0 && height > 0 && width > 0, || {
            "image dimensions must be positive".into()
        })?;
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds an image, clamping every value into `[0, 1]` (NaN maps to 0).
    pub fn from_clamped(channels: usize, height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(channels, height, width, data)
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn mse(&self, other: &Image) -> f64 {
        assert_eq!(self.dims(), other.dims(), "mse of differently shaped images");
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        sum / self.data.len() as f64
    }

    /// FNV-1a over the 8-bit quantised pixels; stable regression fingerprint.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &v in &self.data {
            h ^= quantize(v) as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    /// Interleaved 8-bit RGB buffer. Single-channel images are replicated.
    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        ensure_contract(self.channels == 3 || self.channels == 1, || {
            format!("cannot export a {}-channel image as RGB", self.channels)
        })?;
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = if self.channels == 3 {
                    [
                        quantize(self.get(0, y, x)),
                        quantize(self.get(1, y, x)),
                        quantize(self.get(2, y, x)),
                    ]
                } else {
                    [quantize(self.get(0, y, x)); 3]
                };
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        Ok(buf)
    }

    pub fn from_rgb8(buf: &image::RgbImage) -> Self {
        let (w, h) = (buf.width() as usize, buf.height() as usize);
        let mut img = Image::constant(3, h, w, 0.0);
        for (x, y, px) in buf.enumerate_pixels() {
            for c in 0..3 {
                img.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
            }
        }
        img
    }

    /// Rounds every pixel to the nearest 8-bit level.
    pub fn quantized(&self) -> Image {
        Image {
            data: self.data.iter().map(|&v| quantize(v) as f32 / 255.0).collect(),
            ..self.clone()
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()?
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(Error::from)
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path)?.to_rgb8();
        Ok(Image::from_rgb8(&img))
    }
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_non_finite_and_wrong_length() {
        let shape = LatentShape::new(1, 1, 2);
        assert!(matches!(
            LatentTensor::<f32>::new(shape, vec![1.0]),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            LatentTensor::<f32>::new(shape, vec![1.0, f32::NAN]),
            Err(Error::NumericDomain(_))
        ));
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let shape = LatentShape::new(4, 8, 8);
        let a = LatentTensor::<f64>::randn(shape, &mut ChaCha8Rng::seed_from_u64(3));
        let b = LatentTensor::<f64>::randn(shape, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn png_roundtrip_is_lossless_after_quantisation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| (i as f32 * 0.037) % 1.0).collect();
        let img = Image::new(3, 4, 5, data).unwrap().quantized();
        img.save_png(&path).unwrap();
        assert_eq!(Image::load(&path).unwrap(), img);
    }
}
