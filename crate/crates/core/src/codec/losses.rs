use serde::{Deserialize, Serialize};

use crate::error::{ensure_contract, Error, Result};
use crate::message::BitMessage;
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::LatentTensor;

const LOGVAR_CLAMP: f64 = 30.0;
const PROB_CLAMP: f64 = 1e-7;

/// Mean over elements of `KL(N(mu, exp(logvar)) || N(0, 1))`.
pub fn kl_loss<T: Scalar>(mu: &LatentTensor<T>, logvar: &LatentTensor<T>) -> Result<T> {
    mu.check_same_shape(logvar, "kl_loss")?;
    let half = T::lit(0.5);
    let c = T::lit(LOGVAR_CLAMP);
    let total: T = mu
        .as_slice()
        .iter()
        .zip(logvar.as_slice())
        .map(|(&m, &lv)| {
            let lv = lv.max(-c).min(c);
            half * (m * m + lv.exp() - T::one() - lv)
        })
        .sum();
    Ok((total / T::lit(mu.len() as f64)).max(T::zero()))
}

/// Binary cross-entropy of the logits against `m`, summed over bits.
pub fn bce_loss<T: Scalar>(m: &BitMessage, logits: &[T]) -> Result<T> {
    ensure_contract(m.len() == logits.len(), || {
        format!("bce_loss: {} bits but {} logits", m.len(), logits.len())
    })?;
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    Ok(m.bits()
        .iter()
        .zip(logits)
        .map(|(&b, &l)| {
            let p = sigmoid(l).max(lo).min(hi);
            if b == 1 {
                -p.ln()
            } else {
                -(T::one() - p).ln()
            }
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        let w = Self { lambda1, lambda2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda1 >= 0.0 && self.lambda2 >= 0.0 && self.lambda1 + self.lambda2 > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "loss weights must be non-negative with a positive sum, got {} and {}",
                self.lambda1, self.lambda2
            )))
        }
    }
}

/// `lambda1 * bce_loss + lambda2 * kl_loss`.
pub fn joint_loss<T: Scalar>(
    m: &BitMessage,
    logits: &[T],
    mu: &LatentTensor<T>,
    logvar: &LatentTensor<T>,
    weights: LossWeights,
) -> Result<T> {
    weights.validate()?;
    Ok(T::lit(weights.lambda1) * bce_loss(m, logits)? + T::lit(weights.lambda2) * kl_loss(mu, logvar)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::LatentShape;

    fn scalar(v: f64) -> LatentTensor<f64> {
        LatentTensor::new(LatentShape::new(1, 1, 1), vec![v]).unwrap()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_loss(&scalar(0.0), &scalar(0.0)).unwrap(), 0.0);
        assert!((kl_loss(&scalar(1.0), &scalar(0.0)).unwrap() - 0.5).abs() < 1e-15);
        let v = kl_loss(&scalar(0.0), &scalar(4f64.ln())).unwrap();
        assert!((v - 0.5 * (3.0 - 4f64.ln())).abs() < 1e-15);
        assert!((v - 0.8069).abs() < 1e-4);
        // clamped rather than overflowing
        assert!(kl_loss(&scalar(0.0), &scalar(1e6)).unwrap().is_finite());
    }

    #[test]
    fn bce_examples() {
        let m: BitMessage = "1011".parse().unwrap();
        let v = bce_loss(&m, &[0.0f64; 4]).unwrap();
        assert!((v - 4.0 * 2f64.ln()).abs() < 1e-12);
        let perfect: Vec<f64> = m.bits().iter().map(|&b| if b == 1 { 1e9 } else { -1e9 }).collect();
        assert!(bce_loss(&m, &perfect).unwrap() < 1e-6);
        let one: BitMessage = "1".parse().unwrap();
        let v = bce_loss(&one, &[3f64.ln()]).unwrap();
        assert!((v + 0.75f64.ln()).abs() < 1e-12);
        assert!(bce_loss(&one, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn joint_examples() {
        let one: BitMessage = "1".parse().unwrap();
        let l = [3f64.ln()];
        let w0 = LossWeights::new(1.0, 0.0).unwrap();
        let bce = bce_loss(&one, &l).unwrap();
        assert_eq!(joint_loss(&one, &l, &scalar(1.0), &scalar(0.0), w0).unwrap(), bce);
        let wk = LossWeights::new(0.0, 1.0).unwrap();
        assert_eq!(joint_loss(&one, &l, &scalar(0.0), &scalar(0.0), wk).unwrap(), 0.0);
        let w = LossWeights::new(1.0, 2.0).unwrap();
        let j = joint_loss(&one, &l, &scalar(1.0), &scalar(0.0), w).unwrap();
        assert!((j - (bce + 1.0)).abs() < 1e-12);
        assert!((j - 1.2877).abs() < 1e-4);
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 2.0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn kl_is_zero_only_at_standard_normal(m in -3.0f64..3.0, lv in -3.0f64..3.0) {
            let v = kl_loss(&scalar(m), &scalar(lv)).unwrap();
            proptest::prop_assert!(v >= 0.0);
            if m.abs() > 1e-3 || lv.abs() > 1e-3 {
                proptest::prop_assert!(v > 0.0);
            }
        }
    }
}
