//! Noise schedules for both diffusion processes: the discrete masking
//! marginal `gamma(t)` and the continuous variance-preserving `alpha_bar(t)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("time {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("cannot split length {length} into {steps} unmasking steps")]
    Budget { length: usize, steps: usize },
    #[error("invalid schedule: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub kind: MaskKind,
    pub beta_min: f64,
    pub beta_max: f64,
    pub num_latent_steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            kind: MaskKind::Linear,
            beta_min: 0.1,
            beta_max: 20.0,
            num_latent_steps: 100,
        }
    }
}

fn check_t(t: f64) -> Result<(), ScheduleError> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(ScheduleError::OutOfRange(t))
    }
}

/// `ceil` that ignores rounding noise just above an integer.
fn ceil_tol(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max && self.beta_max.is_finite()) {
            return Err(ScheduleError::Invalid(format!(
                "need 0 < beta_min <= beta_max, got {} and {}",
                self.beta_min, self.beta_max
            )));
        }
        if self.num_latent_steps == 0 {
            return Err(ScheduleError::Invalid("num_latent_steps must be positive".into()));
        }
        Ok(())
    }

    /// Masking probability at time `t`. Endpoints are exact: `gamma(0) = 0`,
    /// `gamma(1) = 1`.
    pub fn gamma_at(&self, t: f64) -> Result<f64, ScheduleError> {
        check_t(t)?;
        if t == 0.0 {
            return Ok(0.0);
        }
        if t == 1.0 {
            return Ok(1.0);
        }
        Ok(match self.kind {
            MaskKind::Linear => t,
            MaskKind::Cosine => 1.0 - (std::f64::consts::FRAC_PI_2 * t).cos(),
        })
    }

    /// Smallest `t` with `gamma(t) = g`.
    pub fn gamma_inverse(&self, g: f64) -> Result<f64, ScheduleError> {
        check_t(g)?;
        Ok(match self.kind {
            MaskKind::Linear => g,
            MaskKind::Cosine => (1.0 - g).acos() / std::f64::consts::FRAC_PI_2,
        })
    }

    pub fn beta_at(&self, t: f64) -> Result<f64, ScheduleError> {
        check_t(t)?;
        Ok(self.beta_min + (self.beta_max - self.beta_min) * t)
    }

    /// `exp(-integral_0^t beta(s) ds)` for the linear `beta`.
    pub fn alpha_bar_at(&self, t: f64) -> Result<f64, ScheduleError> {
        check_t(t)?;
        Ok((-(self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t)).exp())
    }

    /// Reverse-time grid `t_k = 1 - k/K` for `k = 0..=K`.
    pub fn reverse_grid(steps: usize) -> Vec<f64> {
        (0..=steps)
            .map(|k| if k == steps { 0.0 } else { 1.0 - k as f64 / steps as f64 })
            .collect()
    }

    /// Number of tokens to commit at each of `steps` reverse steps for a
    /// sequence of `length` maskable positions.
    ///
    /// Step `k` unmasks `ceil(gamma(t_k) L) - ceil(gamma(t_{k+1}) L)` tokens.
    /// Steps that would commit nothing borrow one token from the largest step
    /// (earliest on ties), so every step commits at least one.
    pub fn unmask_budget(&self, length: usize, steps: usize) -> Result<Vec<usize>, ScheduleError> {
        if steps == 0 || steps > length {
            return Err(ScheduleError::Budget { length, steps });
        }
        let grid = Self::reverse_grid(steps);
        let masked: Vec<usize> = grid
            .iter()
            .map(|&t| self.gamma_at(t).map(|g| ceil_tol(g * length as f64)))
            .collect::<Result<_, _>>()?;
        let mut counts: Vec<usize> = masked.windows(2).map(|w| w[0].abs_diff(w[1])).collect();
        while let Some(zero) = counts.iter().position(|&c| c == 0) {
            let donor = (0..counts.len())
                .fold(0, |best, i| if counts[i] > counts[best] { i } else { best });
            counts[donor] -= 1;
            counts[zero] += 1;
        }
        debug_assert_eq!(counts.iter().sum::<usize>(), length);
        Ok(counts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    fn cosine() -> NoiseSchedule {
        NoiseSchedule { kind: MaskKind::Cosine, ..Default::default() }
    }

    #[test]
    fn gamma_endpoints_and_cosine_midpoint() {
        for s in [linear(), cosine()] {
            assert_eq!(s.gamma_at(0.0).unwrap(), 0.0);
            assert_eq!(s.gamma_at(1.0).unwrap(), 1.0);
        }
        // 1 - cos(pi/4) = 1 - sqrt(2)/2, evaluated independently.
        let expected = 1.0 - 2f64.sqrt() / 2.0;
        assert!((cosine().gamma_at(0.5).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.29289).abs() < 1e-5);
    }

    #[test]
    fn out_of_range_times_are_rejected() {
        assert_eq!(linear().gamma_at(1.5), Err(ScheduleError::OutOfRange(1.5)));
        assert!(linear().alpha_bar_at(-0.1).is_err());
    }

    #[test]
    fn alpha_bar_values() {
        let s = linear();
        assert_eq!(s.alpha_bar_at(0.0).unwrap(), 1.0);
        let a1 = s.alpha_bar_at(1.0).unwrap();
        assert!((a1 - (-10.05f64).exp()).abs() < 1e-15);
        assert!((a1 / 4.3186e-5 - 1.0).abs() < 1e-4);
        assert!(s.alpha_bar_at(0.3).unwrap() > s.alpha_bar_at(0.7).unwrap());
    }

    #[test]
    fn alpha_bar_matches_quadrature_of_beta() {
        let s = NoiseSchedule { beta_min: 0.3, beta_max: 7.0, ..Default::default() };
        for &t in &[0.1, 0.45, 0.8, 1.0] {
            // composite Simpson on beta over [0, t]
            let n = 2000;
            let h = t / n as f64;
            let mut acc = s.beta_at(0.0).unwrap() + s.beta_at(t).unwrap();
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * s.beta_at(i as f64 * h).unwrap();
            }
            let integral = acc * h / 3.0;
            let product = s.alpha_bar_at(t).unwrap() * integral.exp();
            assert!((product - 1.0).abs() < 1e-10, "t={t}: {product}");
        }
    }

    #[test]
    fn budget_examples() {
        assert_eq!(linear().unmask_budget(20, 20).unwrap(), vec![1; 20]);
        let b = linear().unmask_budget(256, 20).unwrap();
        assert_eq!(b.iter().sum::<usize>(), 256);
        assert!(b.iter().all(|&c| c == 12 || c == 13), "{b:?}");
        for s in [linear(), cosine()] {
            assert_eq!(s.unmask_budget(7, 7).unwrap(), vec![1; 7]);
        }
        assert!(linear().unmask_budget(3, 4).is_err());
        assert!(linear().unmask_budget(3, 0).is_err());
    }

    #[test]
    fn cosine_budget_redistributes_empty_steps() {
        // late steps of the cosine schedule round to zero without redistribution
        let b = cosine().unmask_budget(12, 10).unwrap();
        assert_eq!(b.iter().sum::<usize>(), 12);
        assert!(b.iter().all(|&c| c >= 1), "{b:?}");
    }
}
