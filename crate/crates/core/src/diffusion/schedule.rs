use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Smallest cumulative signal coefficient ever divided by.
pub const ALPHA_BAR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Betas linearly spaced from 1e-4 to 0.02.
    LinearBeta,
    /// Squared-cosine cumulative schedule with offset 0.008.
    Cosine,
}

impl ScheduleKind {
    pub fn code(self) -> u8 {
        match self {
            ScheduleKind::LinearBeta => 0,
            ScheduleKind::Cosine => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ScheduleKind::LinearBeta),
            1 => Ok(ScheduleKind::Cosine),
            other => Err(Error::Config(format!("unknown schedule kind code {other}"))),
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_beta" | "linear" => Ok(ScheduleKind::LinearBeta),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::Config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// Cumulative signal coefficients `alpha_bar[0..=T]` of a discrete diffusion.
///
/// `alpha_bar[0] == 1` and the sequence is strictly decreasing afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    kind: ScheduleKind,
    alpha_bar: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn new(kind: ScheduleKind, num_train_steps: usize) -> Result<Self> {
        if num_train_steps < 2 {
            return Err(Error::Config(format!(
                "a noise schedule needs at least 2 train steps, got {num_train_steps}"
            )));
        }
        let n = num_train_steps;
        let mut alpha_bar = Vec::with_capacity(n + 1);
        alpha_bar.push(1.0f64);
        match kind {
            ScheduleKind::LinearBeta => {
                let (lo, hi) = (1e-4f64, 0.02f64);
                let mut prod = 1.0;
                for i in 0..n {
                    let beta = lo + (hi - lo) * i as f64 / (n - 1) as f64;
                    prod *= 1.0 - beta;
                    alpha_bar.push(prod);
                }
            }
            ScheduleKind::Cosine => {
                let s = 0.008f64;
                let f = |t: f64| ((t / n as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                let f0 = f(0.0);
                let mut prev = 1.0;
                for t in 1..=n {
                    let raw = f(t as f64) / f0;
                    let beta = (1.0 - raw / prev).clamp(1e-8, 0.999);
                    prev *= 1.0 - beta;
                    alpha_bar.push(prev);
                }
            }
        }
        Self::from_alpha_bar(kind, alpha_bar.into_iter().map(T::lit).collect())
    }

    /// Validates and wraps an explicit cumulative schedule.
    pub fn from_alpha_bar(kind: ScheduleKind, alpha_bar: Vec<T>) -> Result<Self> {
        if alpha_bar.len() < 3 {
            return Err(Error::Config("schedule needs at least 2 train steps".into()));
        }
        if alpha_bar[0] != T::one() {
            return Err(Error::Config("alpha_bar[0] must be exactly 1".into()));
        }
        for w in alpha_bar.windows(2) {
            if !(w[1] < w[0]) || !(w[1] > T::zero()) {
                return Err(Error::Config(
                    "alpha_bar must be strictly decreasing and positive".into(),
                ));
            }
        }
        Ok(Self { kind, alpha_bar })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of train steps `T`; valid timesteps are `0..=T`.
    pub fn num_train_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> T {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bar
    }

    /// `sqrt(1 - alpha_bar[t])`.
    pub fn sigma(&self, t: usize) -> T {
        (T::one() - self.alpha_bar[t]).max(T::zero()).sqrt()
    }

    pub(crate) fn floored_alpha_bar(&self, t: usize) -> T {
        self.alpha_bar[t].max(T::lit(ALPHA_BAR_FLOOR))
    }

    pub(crate) fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.num_train_steps() {
            Err(Error::Contract(format!(
                "timestep {t} outside 0..={}",
                self.num_train_steps()
            )))
        } else {
            Ok(())
        }
    }

    /// Uniform-stride timesteps `[0, ..., T]` with `steps + 1` entries.
    ///
    /// Sampling walks this list backwards, inversion forwards.
    pub fn inference_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.num_train_steps();
        if steps == 0 || steps > t_max {
            return Err(Error::Config(format!(
                "inference steps must be in 1..={t_max}, got {steps}"
            )));
        }
        Ok((0..=steps).map(|i| i * t_max / steps).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_schedule_boundary_values() {
        let s = NoiseSchedule::<f64>::new(ScheduleKind::LinearBeta, 1000).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        // beta_1 = 1e-4 by construction of the grid
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        assert_eq!(s.num_train_steps(), 1000);
    }

    #[test]
    fn schedules_are_strictly_decreasing_and_normalised() {
        for kind in [ScheduleKind::LinearBeta, ScheduleKind::Cosine] {
            for steps in [2, 10, 1000] {
                let s = NoiseSchedule::<f32>::new(kind, steps).unwrap();
                for t in 1..=steps {
                    assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "{kind:?} {steps} {t}");
                    let sum = s.alpha_bar(t) + s.sigma(t).powi(2);
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rejects_too_few_steps() {
        assert!(matches!(
            NoiseSchedule::<f64>::new(ScheduleKind::Cosine, 1),
            Err(Error::Config(_))
        ));
        assert!("quadratic".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn uniform_stride_timesteps() {
        let s = NoiseSchedule::<f64>::new(ScheduleKind::LinearBeta, 1000).unwrap();
        assert_eq!(s.inference_timesteps(4).unwrap(), vec![0, 250, 500, 750, 1000]);
        assert_eq!(s.inference_timesteps(1).unwrap(), vec![0, 1000]);
        assert!(s.inference_timesteps(0).is_err());
        let ts = s.inference_timesteps(20).unwrap();
        assert_eq!(ts.len(), 21);
        assert_eq!(*ts.last().unwrap(), 1000);
    }
}
