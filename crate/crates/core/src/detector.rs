//! Matched-bit statistics, exact false-positive rates and threshold choice.
//!
//! Under the null hypothesis (image not watermarked) every extracted bit
//! matches the expected one with probability 1/2, so the match count `E`
//! follows `Binomial(k, 1/2)`. Two tail conventions are exposed:
//! [`fpr_exceed`] is `P(E > tau)` and [`tail_at_least`] is `P(E >= t)`.
//! Detection uses the latter: an image is flagged when `E >= threshold`.

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::attack::AttackSpec;
use crate::ecc::RscCode;
use crate::error::{ensure_contract, Result};
use crate::message::BitMessage;
use crate::special::regularized_incomplete_beta;
use crate::tensor::Image;

/// Number of positions where the two messages agree.
pub fn match_count(m: &BitMessage, m_prime: &BitMessage) -> Result<usize> {
    Ok(m.len() - m.hamming(m_prime)?)
}

/// `P(E > tau | H0)` through the regularized incomplete beta,
/// `I_{1/2}(tau + 1, k - tau)`.
pub fn fpr_exceed(tau: usize, k: usize) -> f64 {
    if tau >= k {
        return 0.0;
    }
    regularized_incomplete_beta(0.5f64, (tau + 1) as f64, (k - tau) as f64)
}

fn binomial_row(k: usize) -> Vec<BigUint> {
    let mut row = vec![BigUint::one()];
    for i in 0..k {
        let next = &row[i] * BigUint::from(k - i) / BigUint::from(i + 1);
        row.push(next);
    }
    row
}

/// `P(E > tau | H0)` as an exact rational, `2^-k * sum_{i > tau} C(k, i)`.
pub fn fpr_exceed_exact(tau: usize, k: usize) -> BigRational {
    if tau >= k {
        return BigRational::zero();
    }
    let row = binomial_row(k);
    let num: BigUint = row[tau + 1..].iter().sum();
    BigRational::new(num.into(), (BigUint::one() << k).into())
}

/// Exact summation rounded to the nearest `f64`.
pub fn fpr_exceed_summed(tau: usize, k: usize) -> f64 {
    fpr_exceed_exact(tau, k).to_f64().unwrap_or(f64::NAN)
}

/// Exact `P(E > tau | H0)` for every `tau` in `0..=k`, rounded to `f64`.
/// One binomial row and its suffix sums, so much cheaper than calling
/// [`fpr_exceed_summed`] per `tau`.
pub fn fpr_exceed_summed_row(k: usize) -> Vec<f64> {
    let row = binomial_row(k);
    let denom: num_bigint::BigInt = (BigUint::one() << k).into();
    let mut out = vec![0.0; k + 1];
    let mut suffix = BigUint::zero();
    for tau in (0..k).rev() {
        suffix += &row[tau + 1];
        out[tau] = BigRational::new(suffix.clone().into(), denom.clone()).to_f64().unwrap_or(f64::NAN);
    }
    out
}

/// `P(E >= t | H0)`, the p-value of observing `t` matches.
pub fn tail_at_least(t: usize, k: usize) -> f64 {
    if t == 0 {
        1.0
    } else {
        fpr_exceed(t - 1, k)
    }
}

fn tail_at_least_exact(t: usize, k: usize) -> BigRational {
    if t == 0 {
        BigRational::one()
    } else {
        fpr_exceed_exact(t - 1, k)
    }
}

/// Smallest `t` with `P(E >= t | H0) <= alpha`, decided in exact arithmetic.
pub fn min_threshold(k: usize, alpha: f64) -> Result<usize> {
    ensure_contract(alpha > 0.0 && alpha < 1.0, || {
        format!("alpha must lie in (0, 1), got {alpha}")
    })?;
    let alpha = BigRational::from_float(alpha).expect("finite alpha");
    // P(E >= k + 1) = 0 always satisfies the bound
    Ok((0..=k + 1)
        .find(|&t| tail_at_least_exact(t, k) <= alpha)
        .expect("t = k + 1 always qualifies"))
}

/// How the detection threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// Minimal threshold from the exact binomial tail.
    #[default]
    Exact,
    /// Pins the published operating points 24/32 and 34/48 at alpha = 0.01;
    /// other lengths fall back to the exact threshold.
    PaperCompat,
}

impl ThresholdPolicy {
    pub fn threshold(self, k: usize, alpha: f64) -> Result<usize> {
        match (self, k) {
            (ThresholdPolicy::PaperCompat, 32) if alpha == 0.01 => Ok(24),
            (ThresholdPolicy::PaperCompat, 48) if alpha == 0.01 => Ok(34),
            _ => min_threshold(k, alpha),
        }
    }
}

/// Outcome of one verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub k: usize,
    pub matches: usize,
    pub threshold: usize,
    pub p_value: f64,
    pub detected: bool,
    pub alpha: f64,
    pub extracted: BitMessage,
    pub traced_payload: Option<BitMessage>,
    pub corrected_errors: Option<usize>,
    pub attack_context: Vec<AttackSpec>,
}

impl DetectionReport {
    pub fn bit_accuracy(&self) -> f64 {
        if self.k == 0 {
            0.0
        } else {
            self.matches as f64 / self.k as f64
        }
    }
}

/// Compares extracted bits to the expected message; ECC is applied when a
/// code is supplied.
pub fn detect(
    expected: &BitMessage,
    extracted: &BitMessage,
    alpha: f64,
    policy: ThresholdPolicy,
    ecc: Option<&RscCode>,
) -> Result<DetectionReport> {
    let k = expected.len();
    let matches = match_count(expected, extracted)?;
    let threshold = policy.threshold(k, alpha)?;
    let (traced_payload, corrected_errors) = match ecc {
        Some(code) => {
            let (payload, corrected) = code.decode(extracted)?;
            (Some(payload), Some(corrected))
        }
        None => (None, None),
    };
    Ok(DetectionReport {
        k,
        matches,
        threshold,
        p_value: tail_at_least(matches, k),
        detected: matches >= threshold,
        alpha,
        extracted: extracted.clone(),
        traced_payload,
        corrected_errors,
        attack_context: Vec::new(),
    })
}

/// Anything that can pull watermark bits back out of an image.
pub trait Extractor {
    fn extract_bits(&self, image: &Image) -> Result<BitMessage>;

    fn ecc(&self) -> Option<&RscCode> {
        None
    }
}

/// Extracts bits from `image` and tests them against `expected`.
pub fn verify<E: Extractor + ?Sized>(
    image: &Image,
    expected: &BitMessage,
    extractor: &E,
    alpha: f64,
    policy: ThresholdPolicy,
) -> Result<DetectionReport> {
    let extracted = extractor
        .extract_bits(image)
        .map_err(|e| e.context("extracting watermark bits"))?;
    detect(expected, &extracted, alpha, policy, extractor.ecc())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn match_count_examples() {
        let m: BitMessage = "10110".parse().unwrap();
        assert_eq!(match_count(&m, &m).unwrap(), 5);
        assert_eq!(match_count(&m, &m.complement()).unwrap(), 0);
        assert_eq!(match_count(&m, &"10011".parse().unwrap()).unwrap(), 3);
        assert!(match_count(&m, &"1".parse().unwrap()).is_err());
    }

    #[test]
    fn fpr_boundaries() {
        assert!((fpr_exceed(0, 1) - 0.5).abs() < 1e-15);
        assert_eq!(fpr_exceed(7, 7), 0.0);
        assert_eq!(fpr_exceed_summed(7, 7), 0.0);
        assert_eq!(tail_at_least(0, 10), 1.0);
    }

    #[test]
    fn summed_row_matches_pointwise() {
        for k in [1usize, 9, 40] {
            let row = fpr_exceed_summed_row(k);
            for (tau, &v) in row.iter().enumerate() {
                assert_eq!(v, fpr_exceed_summed(tau, k), "k={k} tau={tau}");
            }
        }
    }

    #[test]
    fn operating_points_from_exact_summation() {
        // exact tails: P(E >= 24 | k=32) = 15033173 / 2^32; P(E >= 23) > 0.01
        assert_eq!(
            fpr_exceed_exact(23, 32),
            BigRational::new(15_033_173u64.into(), (1u64 << 32).into())
        );
        assert_eq!(min_threshold(32, 0.01).unwrap(), 24);
        // at k = 48 the minimal threshold is 33, one below the published 34
        assert_eq!(min_threshold(48, 0.01).unwrap(), 33);
        assert!(fpr_exceed_summed(32, 48) <= 0.01);
        assert!(fpr_exceed_summed(31, 48) > 0.01);
        assert_eq!(ThresholdPolicy::PaperCompat.threshold(48, 0.01).unwrap(), 34);
        assert_eq!(ThresholdPolicy::PaperCompat.threshold(32, 0.01).unwrap(), 24);
        assert_eq!(ThresholdPolicy::PaperCompat.threshold(16, 0.01).unwrap(), 14);
    }

    #[test]
    fn threshold_for_single_bit() {
        // P(E >= 0) = 1, P(E >= 1) = 0.5 <= 0.6
        assert_eq!(min_threshold(1, 0.6).unwrap(), 1);
        assert_eq!(min_threshold(1, 0.4).unwrap(), 2);
        assert!(min_threshold(8, 0.0).is_err());
        assert!(min_threshold(8, 1.0).is_err());
    }

    #[test]
    fn beta_route_agrees_with_exact_route() {
        for k in [1usize, 2, 16, 32, 48, 100, 256] {
            for tau in 0..=k {
                let a = fpr_exceed(tau, k);
                let b = fpr_exceed_summed(tau, k);
                assert!((a - b).abs() <= 1e-12, "k={k} tau={tau}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn fpr_strictly_decreasing_and_symmetric() {
        for k in [5usize, 48, 129] {
            for tau in 1..k {
                assert!(fpr_exceed_exact(tau, k) < fpr_exceed_exact(tau - 1, k));
                // P(E > tau) = P(E < k - tau) = 1 - P(E >= k - tau)
                let lower = BigRational::one() - tail_at_least_exact(k - tau, k);
                assert_eq!(fpr_exceed_exact(tau, k), lower);
            }
        }
    }

    #[test]
    fn detection_report_fields() {
        let m: BitMessage = "1111000011110000".parse().unwrap();
        let mut ext = m.clone();
        ext.flip(0);
        let r = detect(&m, &ext, 0.01, ThresholdPolicy::Exact, None).unwrap();
        assert_eq!((r.k, r.matches, r.threshold), (16, 15, 14));
        assert!(r.detected);
        assert!((r.p_value - 17.0 / 65536.0).abs() < 1e-15);
        let json = serde_json::to_value(&r).unwrap();
        for key in ["k", "matches", "threshold", "p_value", "detected", "alpha", "traced_payload", "attack_context"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }
}
