//! Seeded image perturbations used for adversarial fine-tuning and for the
//! evaluation gauntlet.
//!
//! Every attack maps an image with values in `[0, 1]` to another image of the
//! same shape and range, and is a pure function of `(image, spec)`.
//!
//! Parameter meaning per kind:
//!
//! | kind             | strength                                   | identity |
//! |------------------|--------------------------------------------|----------|
//! | `brightness`     | multiplicative factor `alpha >= 0`         | 1        |
//! | `gaussian_noise` | standard deviation `sigma >= 0`            | 0        |
//! | `contrast`       | factor `alpha >= 0` around the image mean  | 1        |
//! | `hue_shift`      | rotation as a fraction of the hue circle   | 0        |
//! | `jpeg`           | quality in `[1, 100]`                      | 100*     |
//! | `gaussian_blur`  | odd kernel size `k`                        | 1        |
//! | `resize`         | downscale factor in `(0, 1]`               | 1        |
//!
//! (*) up to codec loss.

use std::fmt;
use std::io::Cursor;
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_contract, Error, Result};
use crate::tensor::Image;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum AttackKind {
    Brightness,
    GaussianNoise,
    Contrast,
    HueShift,
    Jpeg,
    GaussianBlur,
    Resize,
    /// Delegated to a registered [`ExternalAttacker`] of this name.
    External(String),
}

impl AttackKind {
    /// The built-in kinds, in the order used by [`sample_random_attack`].
    pub const BUILTIN: [AttackKind; 7] = [
        AttackKind::GaussianNoise,
        AttackKind::GaussianBlur,
        AttackKind::Brightness,
        AttackKind::Contrast,
        AttackKind::HueShift,
        AttackKind::Jpeg,
        AttackKind::Resize,
    ];

    pub fn name(&self) -> &str {
        match self {
            AttackKind::Brightness => "brightness",
            AttackKind::GaussianNoise => "noise",
            AttackKind::Contrast => "contrast",
            AttackKind::HueShift => "hue",
            AttackKind::Jpeg => "jpeg",
            AttackKind::GaussianBlur => "blur",
            AttackKind::Resize => "resize",
            AttackKind::External(name) => name,
        }
    }

    /// Strength at which the attack leaves the image unchanged.
    pub fn identity_strength(&self) -> Option<f64> {
        match self {
            AttackKind::Brightness | AttackKind::Contrast | AttackKind::Resize => Some(1.0),
            AttackKind::GaussianNoise | AttackKind::HueShift => Some(0.0),
            AttackKind::GaussianBlur => Some(1.0),
            AttackKind::Jpeg => Some(100.0),
            AttackKind::External(_) => None,
        }
    }

    /// Strength used in the standard evaluation table.
    pub fn table_strength(&self) -> Option<f64> {
        match self {
            AttackKind::Brightness => Some(2.0),
            AttackKind::GaussianNoise => Some(0.05),
            AttackKind::Contrast => Some(2.0),
            AttackKind::HueShift => Some(0.25),
            AttackKind::Jpeg => Some(50.0),
            AttackKind::GaussianBlur => Some(7.0),
            AttackKind::Resize => Some(0.3),
            AttackKind::External(_) => None,
        }
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "brightness" => AttackKind::Brightness,
            "noise" | "gaussian_noise" => AttackKind::GaussianNoise,
            "contrast" => AttackKind::Contrast,
            "hue" | "hue_shift" => AttackKind::HueShift,
            "jpeg" => AttackKind::Jpeg,
            "blur" | "gaussian_blur" => AttackKind::GaussianBlur,
            "resize" => AttackKind::Resize,
            _ => match s.strip_prefix("external:") {
                Some(name) if !name.is_empty() => AttackKind::External(name.to_string()),
                _ => return Err(Error::Config(format!("unknown attack kind `{s}`"))),
            },
        })
    }
}

impl From<AttackKind> for String {
    fn from(k: AttackKind) -> String {
        k.to_string()
    }
}

impl TryFrom<String> for AttackKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackKind::External(name) => write!(f, "external:{name}"),
            other => f.write_str(other.name()),
        }
    }
}

/// One perturbation with its parameter and RNG seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub strength: f64,
    #[serde(default)]
    pub seed: u64,
}

impl AttackSpec {
    /// Builds a validated spec.
    pub fn new(kind: AttackKind, strength: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            kind,
            strength,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The kind's standard evaluation strength.
    pub fn table(kind: AttackKind, seed: u64) -> Result<Self> {
        let strength = kind
            .table_strength()
            .ok_or_else(|| Error::Config(format!("`{kind}` has no standard strength")))?;
        Self::new(kind, strength, seed)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.strength;
        let ok = s.is_finite()
            && match self.kind {
                AttackKind::Brightness | AttackKind::Contrast | AttackKind::GaussianNoise => s >= 0.0,
                AttackKind::HueShift => s.abs() <= 1.0,
                AttackKind::Jpeg => (1.0..=100.0).contains(&s) && s.fract() == 0.0,
                AttackKind::GaussianBlur => (1.0..=63.0).contains(&s) && s.fract() == 0.0 && !(s as u32).is_multiple_of(2),
                AttackKind::Resize => s > 0.0 && s <= 1.0,
                AttackKind::External(_) => true,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "strength {s} outside the valid domain of `{}`",
                self.kind
            )))
        }
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.strength)
    }
}

/// Parses `KIND:PARAM` (seed 0), e.g. `jpeg:50` or `external:bm3d:30`.
impl FromStr for AttackSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, param) = s
            .rsplit_once(':')
            .ok_or_else(|| Error::Config(format!("attack `{s}` is not of the form KIND:PARAM")))?;
        let strength: f64 = param
            .parse()
            .map_err(|_| Error::Config(format!("attack parameter `{param}` is not a number")))?;
        AttackSpec::new(kind.parse()?, strength, 0)
    }
}

/// Image-to-image attack implemented outside this crate, such as a learned
/// compression model or a regeneration attack.
pub trait ExternalAttacker: Send + Sync {
    fn name(&self) -> &str;
    fn attack(&self, image: &Image) -> Result<Image>;
}

/// Applies a built-in attack. External kinds fail with
/// [`Error::AdapterMissing`]; use [`AttackSuite`] to supply adapters.
pub fn apply_attack(image: &Image, spec: &AttackSpec) -> Result<Image> {
    spec.validate()?;
    ensure_contract(image.in_unit_range(), || "attack input must lie in [0, 1]".into())?;
    let s = spec.strength;
    match &spec.kind {
        AttackKind::Brightness => Ok(map_pixels(image, |v| v * s as f32)),
        AttackKind::GaussianNoise => Ok(gaussian_noise(image, s, spec.seed)),
        AttackKind::Contrast => {
            let mean = image.as_slice().iter().map(|&v| v as f64).sum::<f64>()
                / image.as_slice().len() as f64;
            Ok(map_pixels(image, |v| ((v as f64 - mean) * s + mean) as f32))
        }
        AttackKind::HueShift => hue_shift(image, s),
        AttackKind::Jpeg => jpeg(image, s as u8),
        AttackKind::GaussianBlur => Ok(gaussian_blur(image, s as usize)),
        AttackKind::Resize => resize(image, s),
        AttackKind::External(name) => Err(Error::AdapterMissing(name.clone())),
    }
}

/// Built-in attacks plus any registered external adapters.
#[derive(Default)]
pub struct AttackSuite {
    external: Vec<Box<dyn ExternalAttacker>>,
}

impl AttackSuite {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, attacker: Box<dyn ExternalAttacker>) {
        self.external.push(attacker);
    }

    pub fn supports(&self, kind: &AttackKind) -> bool {
        match kind {
            AttackKind::External(name) => self.external.iter().any(|a| a.name() == name),
            _ => true,
        }
    }

    pub fn apply(&self, image: &Image, spec: &AttackSpec) -> Result<Image> {
        match &spec.kind {
            AttackKind::External(name) => {
                let attacker = self
                    .external
                    .iter()
                    .find(|a| a.name() == name)
                    .ok_or_else(|| Error::AdapterMissing(name.clone()))?;
                let out = attacker.attack(image)?;
                ensure_contract(out.dims() == image.dims(), || {
                    format!("external attacker `{name}` changed the image shape")
                })?;
                Image::from_clamped(out.channels(), out.height(), out.width(), out.as_slice().to_vec())
            }
            _ => apply_attack(image, spec),
        }
    }
}

/// Draws a built-in attack uniformly from the adversarial-training pool:
/// noise sigma in [0, 0.05], blur k in {3, 5, 7}, brightness and contrast in
/// [0.5, 2], hue in [-0.25, 0.25], jpeg quality in [50, 90], resize in
/// [0.3, 1].
pub fn sample_random_attack(rng_seed: u64) -> AttackSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let kind = AttackKind::BUILTIN[rng.random_range(0..AttackKind::BUILTIN.len())].clone();
    let strength = match kind {
        AttackKind::GaussianNoise => rng.random_range(0.0..=0.05),
        AttackKind::GaussianBlur => [3.0, 5.0, 7.0][rng.random_range(0..3)],
        AttackKind::Brightness | AttackKind::Contrast => rng.random_range(0.5..=2.0),
        AttackKind::HueShift => rng.random_range(-0.25..=0.25),
        AttackKind::Jpeg => rng.random_range(50..=90) as f64,
        AttackKind::Resize => rng.random_range(0.3..=1.0),
        AttackKind::External(_) => unreachable!("pool holds built-in kinds only"),
    };
    AttackSpec {
        kind,
        strength,
        seed: rng.random(),
    }
}

fn map_pixels(image: &Image, f: impl Fn(f32) -> f32) -> Image {
    let mut out = image.clone();
    for v in out.as_mut_slice() {
        *v = f(*v).clamp(0.0, 1.0);
    }
    out
}

fn gaussian_noise(image: &Image, sigma: f64, seed: u64) -> Image {
    if sigma == 0.0 {
        return image.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    let mut out = image.clone();
    for v in out.as_mut_slice() {
        *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
    }
    out
}

fn require_rgb(image: &Image, what: &str) -> Result<()> {
    ensure_contract(image.channels() == 3, || {
        format!("{what} needs a 3-channel image, got {}", image.channels())
    })
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h / 6.0, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

fn hue_shift(image: &Image, delta: f64) -> Result<Image> {
    require_rgb(image, "hue shift")?;
    if delta == 0.0 {
        return Ok(image.clone());
    }
    let mut out = image.clone();
    for y in 0..image.height() {
        for x in 0..image.width() {
            let (h, s, v) = rgb_to_hsv(image.get(0, y, x), image.get(1, y, x), image.get(2, y, x));
            let (r, g, b) = hsv_to_rgb(h + delta as f32, s, v);
            out.set(0, y, x, r.clamp(0.0, 1.0));
            out.set(1, y, x, g.clamp(0.0, 1.0));
            out.set(2, y, x, b.clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

fn jpeg(image: &Image, quality: u8) -> Result<Image> {
    let rgb = image.to_rgb8()?;
    let mut bytes = Vec::new();
    JpegEncoder::new_with_quality(Cursor::new(&mut bytes), quality).encode_image(&rgb)?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Jpeg)?.to_rgb8();
    let out = Image::from_rgb8(&decoded);
    if image.channels() == 1 {
        let lum: Vec<f32> = (0..image.height() * image.width())
            .map(|i| out.as_slice()[i])
            .collect();
        return Image::new(1, image.height(), image.width(), lum);
    }
    Ok(out)
}

fn gaussian_kernel(size: usize) -> Vec<f32> {
    // sigma rule of thumb tying the spread to the kernel size
    let sigma = 0.3 * ((size as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| (w / total) as f32).collect()
}

/// Separable Gaussian blur with reflected borders.
fn gaussian_blur(image: &Image, size: usize) -> Image {
    if size == 1 {
        return image.clone();
    }
    let kernel = gaussian_kernel(size);
    let half = (size / 2) as isize;
    let (c, h, w) = image.dims();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        // period-(2n - 2) reflection handles kernels wider than the image
        if n == 1 {
            return 0;
        }
        let period = 2 * n - 2;
        i = i.rem_euclid(period);
        (if i >= n { period - i } else { i }) as usize
    };
    let mut tmp = image.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let acc: f32 = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, &k)| k * image.get(ch, y, reflect(x as isize + j as isize - half, w)))
                    .sum();
                tmp.set(ch, y, x, acc);
            }
        }
    }
    let mut out = tmp.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let acc: f32 = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, &k)| k * tmp.get(ch, reflect(y as isize + j as isize - half, h), x))
                    .sum();
                out.set(ch, y, x, acc.clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Bilinear downscale by `scale`, then back up to the original size.
fn resize(image: &Image, scale: f64) -> Result<Image> {
    require_rgb(image, "resize")?;
    if scale == 1.0 {
        return Ok(image.clone());
    }
    let (_, h, w) = image.dims();
    let mut buf: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for ch in 0..3 {
            px[ch] = image.get(ch, y as usize, x as usize);
        }
    }
    let small_w = ((w as f64 * scale).round() as u32).max(1);
    let small_h = ((h as f64 * scale).round() as u32).max(1);
    let small = imageops::resize(&buf, small_w, small_h, FilterType::Triangle);
    let back = imageops::resize(&small, w as u32, h as u32, FilterType::Triangle);
    let mut out = image.clone();
    for (x, y, px) in back.enumerate_pixels() {
        for ch in 0..3 {
            out.set(ch, y as usize, x as usize, px[ch].clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image() -> Image {
        let (h, w) = (32, 32);
        let mut img = Image::constant(3, h, w, 0.0);
        for y in 0..h {
            for x in 0..w {
                img.set(0, y, x, x as f32 / (w - 1) as f32);
                img.set(1, y, x, y as f32 / (h - 1) as f32);
                img.set(2, y, x, if (x / 4 + y / 4) % 2 == 0 { 0.8 } else { 0.2 });
            }
        }
        img
    }

    fn spec(kind: AttackKind, s: f64) -> AttackSpec {
        AttackSpec::new(kind, s, 7).unwrap()
    }

    #[test]
    fn brightness_doubles_and_clips() {
        let img = Image::constant(3, 4, 4, 0.3);
        let out = apply_attack(&img, &spec(AttackKind::Brightness, 2.0)).unwrap();
        assert!(out.as_slice().iter().all(|&v| (v - 0.6).abs() < 1e-6));
        let bright = Image::constant(3, 4, 4, 0.7);
        let out = apply_attack(&bright, &spec(AttackKind::Brightness, 2.0)).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn identity_strengths_leave_image_unchanged() {
        let img = test_image();
        for kind in AttackKind::BUILTIN {
            if kind == AttackKind::Jpeg {
                continue;
            }
            let s = kind.identity_strength().unwrap();
            let out = apply_attack(&img, &spec(kind.clone(), s)).unwrap();
            assert!(out.mse(&img) < 1e-10, "{kind} at identity strength changed the image");
        }
        let q100 = apply_attack(&img, &spec(AttackKind::Jpeg, 100.0)).unwrap();
        assert!(q100.mse(&img) < 2e-4);
    }

    #[test]
    fn shape_and_range_preserved_for_every_kind() {
        let img = test_image();
        for kind in AttackKind::BUILTIN {
            let out = apply_attack(&img, &AttackSpec::table(kind.clone(), 3).unwrap()).unwrap();
            assert_eq!(out.dims(), img.dims());
            assert!(out.in_unit_range(), "{kind}");
            assert!(out.mse(&img) > 0.0, "{kind} at table strength should perturb");
        }
    }

    #[test]
    fn attacks_are_deterministic() {
        let img = test_image();
        for seed in 0..20 {
            let s = sample_random_attack(seed);
            assert_eq!(s, sample_random_attack(seed));
            assert_eq!(apply_attack(&img, &s).unwrap(), apply_attack(&img, &s).unwrap());
        }
    }

    #[test]
    fn jpeg_q50_distortion_band() {
        let img = test_image();
        let out = apply_attack(&img, &spec(AttackKind::Jpeg, 50.0)).unwrap();
        let mse = out.mse(&img);
        // trusted-run value 1.1e-3; band allows encoder differences
        assert!(mse > 2e-4 && mse < 5e-3, "jpeg q50 mse {mse}");
    }

    #[test]
    fn hue_full_turn_is_identity_and_half_turn_swaps_complements() {
        let img = test_image();
        let full = hue_shift(&img, 1.0).unwrap();
        assert!(full.mse(&img) < 1e-10);
        let pure_red = {
            let mut i = Image::constant(3, 1, 1, 0.0);
            i.set(0, 0, 0, 1.0);
            i
        };
        let cyan = hue_shift(&pure_red, 0.5).unwrap();
        assert_eq!(cyan.as_slice(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn blur_kernel_normalised_and_preserves_constants() {
        for k in [3, 5, 7] {
            let s: f32 = gaussian_kernel(k).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let img = Image::constant(3, 5, 5, 0.4);
        let out = gaussian_blur(&img, 7);
        assert!(out.as_slice().iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn parse_and_validate_specs() {
        let s: AttackSpec = "jpeg:50".parse().unwrap();
        assert_eq!((s.kind, s.strength), (AttackKind::Jpeg, 50.0));
        let e: AttackSpec = "external:bm3d:30".parse().unwrap();
        assert_eq!(e.kind, AttackKind::External("bm3d".into()));
        assert!("jpeg:0".parse::<AttackSpec>().is_err());
        assert!("blur:4".parse::<AttackSpec>().is_err());
        assert!("resize:1.5".parse::<AttackSpec>().is_err());
        assert!("sharpen:1".parse::<AttackSpec>().is_err());
        let err = apply_attack(&test_image(), &e).unwrap_err();
        assert!(matches!(err, Error::AdapterMissing(_)));
    }

    struct Invert;
    impl ExternalAttacker for Invert {
        fn name(&self) -> &str {
            "invert"
        }
        fn attack(&self, image: &Image) -> Result<Image> {
            Ok(map_pixels(image, |v| 1.0 - v))
        }
    }

    #[test]
    fn suite_dispatches_external_adapters() {
        let mut suite = AttackSuite::new();
        let spec: AttackSpec = "external:invert:0".parse().unwrap();
        assert!(!suite.supports(&spec.kind));
        suite.register(Box::new(Invert));
        let out = suite.apply(&Image::constant(3, 2, 2, 0.25), &spec).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn random_attack_kinds_cover_pool_uniformly() {
        let n = 10_000u64;
        let mut counts = [0usize; 7];
        for seed in 0..n {
            let s = sample_random_attack(seed);
            s.validate().unwrap();
            let idx = AttackKind::BUILTIN.iter().position(|k| *k == s.kind).unwrap();
            counts[idx] += 1;
        }
        let expected = n as f64 / 7.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // chi-square 0.999 quantile with 6 degrees of freedom
        assert!(chi2 < 22.46, "chi2 {chi2}, counts {counts:?}");
    }
}
