//! Closed-form diffusion updates: forward noising, clean-sample prediction,
//! deterministic DDIM denoise/invert steps and classifier-free guidance.

use super::schedule::{NoiseSchedule, ALPHA_BAR_FLOOR};
use crate::error::{ensure_contract, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::LatentTensor;

/// `sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`.
pub fn forward_diffuse<T: Scalar>(
    x0: &LatentTensor<T>,
    t: usize,
    eps: &LatentTensor<T>,
    sched: &NoiseSchedule<T>,
) -> Result<LatentTensor<T>> {
    x0.check_same_shape(eps, "forward_diffuse")?;
    sched.check_timestep(t)?;
    Ok(x0.lincomb(sched.alpha_bar(t).sqrt(), eps, sched.sigma(t)))
}

fn signal_coefficient<T: Scalar>(sched: &NoiseSchedule<T>, t: usize) -> Result<T> {
    sched.check_timestep(t)?;
    let ab = sched.alpha_bar(t);
    if ab < T::lit(ALPHA_BAR_FLOOR) {
        return Err(Error::NumericDomain(format!(
            "alpha_bar[{t}] = {ab} is below the division floor {ALPHA_BAR_FLOOR}"
        )));
    }
    Ok(sched.floored_alpha_bar(t).sqrt())
}

/// Clean-sample estimate `(x_t - sqrt(1 - alpha_bar[t]) * eps_hat) / sqrt(alpha_bar[t])`.
pub fn predict_x0<T: Scalar>(
    x_t: &LatentTensor<T>,
    eps_hat: &LatentTensor<T>,
    t: usize,
    sched: &NoiseSchedule<T>,
) -> Result<LatentTensor<T>> {
    x_t.check_same_shape(eps_hat, "predict_x0")?;
    let a = signal_coefficient(sched, t)?;
    let inv = T::one() / a;
    Ok(x_t.lincomb(inv, eps_hat, -sched.sigma(t) * inv))
}

/// Moves a latent from timestep `t` to timestep `target` holding `eps_hat`
/// fixed. Denoising and inversion are the same formula with the target on
/// either side of `t`.
fn ddim_transport<T: Scalar>(
    x_t: &LatentTensor<T>,
    eps_hat: &LatentTensor<T>,
    t: usize,
    target: usize,
    sched: &NoiseSchedule<T>,
) -> Result<LatentTensor<T>> {
    sched.check_timestep(target)?;
    let x0 = predict_x0(x_t, eps_hat, t, sched)?;
    Ok(x0.lincomb(sched.alpha_bar(target).sqrt(), eps_hat, sched.sigma(target)))
}

/// Deterministic DDIM denoising update from `t` to `t_prev < t`.
pub fn ddim_step<T: Scalar>(
    x_t: &LatentTensor<T>,
    eps_hat: &LatentTensor<T>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule<T>,
) -> Result<LatentTensor<T>> {
    ensure_contract(t_prev < t, || {
        format!("ddim_step needs t_prev < t, got t_prev={t_prev}, t={t}")
    })?;
    ddim_transport(x_t, eps_hat, t, t_prev, sched)
}

/// DDIM inversion update from `t` to `t_next > t`, reusing the noise
/// estimate made at `t`.
pub fn ddim_invert_step<T: Scalar>(
    x_t: &LatentTensor<T>,
    eps_hat: &LatentTensor<T>,
    t: usize,
    t_next: usize,
    sched: &NoiseSchedule<T>,
) -> Result<LatentTensor<T>> {
    ensure_contract(t_next > t, || {
        format!("ddim_invert_step needs t_next > t, got t={t}, t_next={t_next}")
    })?;
    ddim_transport(x_t, eps_hat, t, t_next, sched)
}

/// Classifier-free guidance `eps_uncond + w * (eps_cond - eps_uncond)`.
pub fn cfg_noise<T: Scalar>(
    eps_cond: &LatentTensor<T>,
    eps_uncond: &LatentTensor<T>,
    w: T,
) -> Result<LatentTensor<T>> {
    eps_cond.check_same_shape(eps_uncond, "cfg_noise")?;
    ensure_contract(w >= T::zero(), || format!("guidance scale must be >= 0, got {w}"))?;
    if w == T::one() {
        return Ok(eps_cond.clone());
    }
    if w == T::zero() {
        return Ok(eps_uncond.clone());
    }
    Ok(eps_uncond.zip_map(eps_cond, |u, c| u + w * (c - u)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::{ScheduleKind, NoiseSchedule};
    use crate::tensor::LatentShape;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const SCALAR: LatentShape = LatentShape::new(1, 1, 1);

    fn scalar(v: f64) -> LatentTensor<f64> {
        LatentTensor::new(SCALAR, vec![v]).unwrap()
    }

    /// alpha_bar = [1, 0.5, 0.25]: t=2 has 0.25, t=1 has 0.5.
    fn toy_schedule() -> NoiseSchedule<f64> {
        NoiseSchedule::from_alpha_bar(ScheduleKind::LinearBeta, vec![1.0, 0.5, 0.25]).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn forward_diffuse_examples() {
        let s = toy_schedule();
        let x0 = scalar(1.0);
        assert_eq!(forward_diffuse(&x0, 0, &scalar(0.7), &s).unwrap(), x0);
        assert_eq!(forward_diffuse(&x0, 2, &scalar(0.0), &s).unwrap().as_slice()[0], 0.5);
        // 0.5 + sqrt(0.75)
        let v = forward_diffuse(&x0, 2, &scalar(1.0), &s).unwrap().as_slice()[0];
        assert!(close(v, 1.366_025_403_784_438_6, 1e-12));
    }

    #[test]
    fn forward_diffuse_rejects_shape_mismatch() {
        let s = toy_schedule();
        let other = LatentTensor::<f64>::zeros(LatentShape::new(1, 1, 2));
        assert!(matches!(
            forward_diffuse(&scalar(1.0), 1, &other, &s),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn predict_x0_examples() {
        let s = toy_schedule();
        let v = predict_x0(&scalar(1.366), &scalar(0.0), 2, &s).unwrap().as_slice()[0];
        assert!(close(v, 1.366 / 0.5, 1e-12));
        let v = predict_x0(&scalar(1.366), &scalar(1.0), 2, &s).unwrap().as_slice()[0];
        assert!(close(v, 1.0, 1e-3));

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = LatentShape::new(4, 8, 8);
        let x0 = LatentTensor::<f64>::randn(shape, &mut rng);
        let eps = LatentTensor::<f64>::randn(shape, &mut rng);
        let big = NoiseSchedule::<f64>::new(ScheduleKind::LinearBeta, 1000).unwrap();
        for t in [1, 10, 500, 999] {
            let xt = forward_diffuse(&x0, t, &eps, &big).unwrap();
            let rec = predict_x0(&xt, &eps, t, &big).unwrap();
            assert!(rec.max_abs_diff(&x0) < 1e-9, "t={t}");
        }
    }

    #[test]
    fn predict_x0_floor_error() {
        let s = NoiseSchedule::from_alpha_bar(ScheduleKind::Cosine, vec![1.0, 0.5, 1e-12]).unwrap();
        assert!(matches!(
            predict_x0(&scalar(1.0), &scalar(0.0), 2, &s),
            Err(Error::NumericDomain(_))
        ));
    }

    #[test]
    fn ddim_step_examples() {
        let s = toy_schedule();
        // target alpha_bar = 1 returns the x0 estimate
        let to_zero = ddim_step(&scalar(1.366), &scalar(0.3), 2, 0, &s).unwrap();
        let x0 = predict_x0(&scalar(1.366), &scalar(0.3), 2, &s).unwrap();
        assert_eq!(to_zero, x0);
        // sqrt(0.5) * 1.0 + sqrt(0.5) * 1 at the exact forward value
        let xt = forward_diffuse(&scalar(1.0), 2, &scalar(1.0), &s).unwrap();
        let v = ddim_step(&xt, &scalar(1.0), 2, 1, &s).unwrap().as_slice()[0];
        assert!(close(v, std::f64::consts::SQRT_2, 1e-12));
        assert!(close(
            ddim_step(&scalar(1.366), &scalar(1.0), 2, 1, &s).unwrap().as_slice()[0],
            std::f64::consts::SQRT_2,
            1e-3
        ));
        assert!(ddim_step(&xt, &scalar(1.0), 1, 2, &s).is_err());
    }

    #[test]
    fn ddim_step_reproduces_forward_diffusion_with_true_noise() {
        let big = NoiseSchedule::<f64>::new(ScheduleKind::LinearBeta, 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = LatentShape::new(4, 8, 8);
        let x0 = LatentTensor::randn(shape, &mut rng);
        let eps = LatentTensor::randn(shape, &mut rng);
        let xt = forward_diffuse(&x0, 700, &eps, &big).unwrap();
        let stepped = ddim_step(&xt, &eps, 700, 300, &big).unwrap();
        let direct = forward_diffuse(&x0, 300, &eps, &big).unwrap();
        assert!(stepped.max_abs_diff(&direct) < 1e-9);
    }

    #[test]
    fn invert_step_examples() {
        let s = toy_schedule();
        let x0 = scalar(0.8);
        let up = ddim_invert_step(&x0, &scalar(0.0), 0, 2, &s).unwrap().as_slice()[0];
        assert!(close(up, 0.5 * 0.8, 1e-12));
        assert!(ddim_invert_step(&x0, &scalar(0.0), 2, 1, &s).is_err());
    }

    #[test]
    fn cfg_examples() {
        let c = scalar(1.0);
        let u = scalar(0.0);
        assert_eq!(cfg_noise(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_noise(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_noise(&c, &u, 2.0).unwrap().as_slice()[0], 2.0);
        assert!(cfg_noise(&c, &u, -0.5).is_err());
    }

    proptest! {
        #[test]
        fn invert_undoes_step_at_fixed_noise(seed in any::<u64>(), t in 2usize..=1000, frac in 0.0f64..1.0) {
            let big = NoiseSchedule::<f64>::new(ScheduleKind::LinearBeta, 1000).unwrap();
            let t_prev = ((t as f64) * frac) as usize;
            prop_assume!(t_prev < t);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = LatentShape::new(4, 8, 8);
            let xt = LatentTensor::randn(shape, &mut rng);
            let e = LatentTensor::randn(shape, &mut rng);
            let down = ddim_step(&xt, &e, t, t_prev, &big).unwrap();
            let up = ddim_invert_step(&down, &e, t_prev, t, &big).unwrap();
            let rel = up.lincomb(1.0, &xt, -1.0).norm() / xt.norm();
            prop_assert!(rel < 1e-9);
        }

        #[test]
        fn cfg_is_affine_in_scale(seed in any::<u64>(), w1 in 0.0f64..20.0, w2 in 0.0f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = LatentShape::new(2, 3, 3);
            let a = LatentTensor::randn(shape, &mut rng);
            let b = LatentTensor::randn(shape, &mut rng);
            let lhs = cfg_noise(&a, &b, w1).unwrap().lincomb(1.0, &cfg_noise(&a, &b, w2).unwrap(), 1.0);
            let rhs = cfg_noise(&a, &b, (w1 + w2) / 2.0).unwrap().scale(2.0);
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-9);
        }
    }

    #[test]
    fn forward_diffusion_preserves_unit_variance() {
        let big = NoiseSchedule::<f64>::new(ScheduleKind::LinearBeta, 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let shape = LatentShape::new(1, 100, 100);
        let x0 = LatentTensor::<f64>::randn(shape, &mut rng);
        let eps = LatentTensor::<f64>::randn(shape, &mut rng);
        let n = shape.numel() as f64;
        // standard error of the sample variance of a unit Gaussian is sqrt(2/n)
        let se = (2.0 / n).sqrt();
        for t in [0, 1, 100, 500, 1000] {
            let zt = forward_diffuse(&x0, t, &eps, &big).unwrap();
            let mean = zt.mean();
            let var = zt.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!((var - 1.0).abs() < 3.0 * se, "t={t} var={var}");
        }
    }
}
