//! Stage I: the continuous prior over semantic vectors. Closed-form VP
//! perturbation, the epsilon-prediction loss and DDPM ancestral sampling.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::modality::Modality;
use crate::nets::EpsDenoiser;
use crate::schedules::{NoiseSchedule, ScheduleError};
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LatentError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    Dim { expected: usize, found: usize },
    #[error("batch arguments disagree in length")]
    Ragged,
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LatentError> = std::result::Result<T, E>;

/// Unit-norm point on the semantic sphere, tagged with its modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticVector {
    values: Vec<f64>,
    modality: Modality,
}

impl SemanticVector {
    /// Normalizes `values`; `None` when the norm is zero or non-finite.
    pub fn normalized(mut values: Vec<f64>, modality: Modality) -> Option<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return None;
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Some(SemanticVector { values, modality })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &SemanticVector) -> f64 {
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        dot / (self.norm() * other.norm())
    }

    /// Stacks vectors into a `[B, d]` tensor.
    pub fn stack(items: &[&SemanticVector]) -> Result<Tensor> {
        let d = items.first().map_or(0, |v| v.dim());
        let mut data = Vec::with_capacity(items.len() * d);
        for v in items {
            if v.dim() != d {
                return Err(LatentError::Dim { expected: d, found: v.dim() });
            }
            data.extend_from_slice(&v.values);
        }
        Ok(Tensor::new(vec![items.len(), d], data)?)
    }
}

/// `r_t = sqrt(abar(t)) r0 + sqrt(1 - abar(t)) eps`.
pub fn forward_perturb(schedule: &NoiseSchedule, r0: &[f64], t: f64, eps: &[f64]) -> Result<Vec<f64>> {
    if r0.len() != eps.len() {
        return Err(LatentError::Dim { expected: r0.len(), found: eps.len() });
    }
    let ab = schedule.alpha_bar_at(t)?;
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(r0.iter().zip(eps).map(|(r, e)| a * r + s * e).collect())
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Epsilon-prediction loss: mean over items of `||eps - eps_phi(r_t, t, c_m)||^2`.
/// `r0` and `eps` are row-major `[B, d]`.
pub fn latent_loss<D: EpsDenoiser + ?Sized>(
    denoiser: &D,
    g: &mut Graph,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    r0: &[f64],
    modality: &[Modality],
    times: &[f64],
    eps: &[f64],
) -> Result<Var> {
    let (b, d) = (times.len(), denoiser.dim());
    if modality.len() != b || r0.len() != b * d || eps.len() != b * d {
        return Err(LatentError::Ragged);
    }
    let mut rt = Vec::with_capacity(b * d);
    for i in 0..b {
        rt.extend(forward_perturb(schedule, &r0[i * d..(i + 1) * d], times[i], &eps[i * d..(i + 1) * d])?);
    }
    let rt = g.constant(Tensor::new(vec![b, d], rt)?);
    let target = g.constant(Tensor::new(vec![b, d], eps.to_vec())?);
    let pred = denoiser.predict(g, store, rt, times, modality)?;
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq)?;
    Ok(g.scale(total, 1.0 / b as f64)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AncestralOptions {
    /// Drop the posterior noise term, leaving the pure drift trajectory.
    pub suppress_noise: bool,
}

/// DDPM ancestral sampling on the grid `t_k = k / N`, `N = num_latent_steps`,
/// for a batch of modality labels. Returns raw (unnormalized) `r_0` rows.
///
/// The per-step noise variance is `beta_k = 1 - abar_k / abar_{k-1}`. The
/// smaller posterior variance over-concentrates samples at N = 100.
pub fn ancestral_sample_raw<D: EpsDenoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    modality: &[Modality],
    options: AncestralOptions,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let (b, d, n) = (modality.len(), denoiser.dim(), schedule.num_latent_steps);
    let mut r: Vec<Vec<f64>> = (0..b).map(|_| standard_normal(rng, d)).collect();
    for k in (1..=n).rev() {
        let t = k as f64 / n as f64;
        let ab = schedule.alpha_bar_at(t)?;
        let ab_prev = schedule.alpha_bar_at((k - 1) as f64 / n as f64)?;
        let alpha = ab / ab_prev;
        let beta = 1.0 - alpha;
        let mut g = Graph::new();
        let flat: Vec<f64> = r.iter().flatten().copied().collect();
        let x = g.constant(Tensor::new(vec![b, d], flat)?);
        let eps = denoiser.predict(&mut g, store, x, &vec![t; b], modality)?;
        let eps = g.value(eps);
        for (i, row) in r.iter_mut().enumerate() {
            let noise = if k > 1 && !options.suppress_noise { standard_normal(rng, d) } else { vec![0.0; d] };
            for j in 0..d {
                let mean = (row[j] - beta / (1.0 - ab).sqrt() * eps[i * d + j]) / alpha.sqrt();
                row[j] = mean + beta.sqrt() * noise[j];
            }
        }
    }
    Ok(r)
}

/// One prior sample per modality label, re-projected to the unit sphere.
pub fn ancestral_sample<D: EpsDenoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    modality: &[Modality],
    rng: &mut R,
) -> Result<Vec<SemanticVector>> {
    let raw = ancestral_sample_raw(denoiser, store, schedule, modality, AncestralOptions::default(), rng)?;
    raw.into_iter()
        .zip(modality)
        .map(|(v, &m)| {
            SemanticVector::normalized(v, m).ok_or(LatentError::Tensor(TensorError::NonFinite {
                op: "ancestral_sample",
                node: 0,
            }))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Predicts `scale * r_t` so the drift has a nontrivial eps term.
    struct Linear {
        d: usize,
        scale: f64,
    }

    impl EpsDenoiser for Linear {
        fn dim(&self) -> usize {
            self.d
        }
        fn predict(&self, g: &mut Graph, _: &ParamStore, r_t: Var, _: &[f64], _: &[Modality]) -> crate::tensor::Result<Var> {
            g.scale(r_t, self.scale)
        }
    }

    #[test]
    fn perturb_endpoints() {
        let s = NoiseSchedule::default();
        let r0 = [0.6, 0.8];
        assert_eq!(forward_perturb(&s, &r0, 0.0, &[3.0, -1.0]).unwrap(), r0.to_vec());
        let a = s.alpha_bar_at(0.4).unwrap().sqrt();
        let out = forward_perturb(&s, &r0, 0.4, &[0.0, 0.0]).unwrap();
        assert_eq!(out, vec![a * 0.6, a * 0.8]);
    }

    #[test]
    fn zero_predictor_loss_matches_expected_norm() {
        let s = NoiseSchedule::default();
        let den = Linear { d: 16, scale: 0.0 };
        let store = ParamStore::new();
        let mut r = rng::stream(3, "loss");
        let b = 10_000;
        let r0: Vec<f64> = (0..b).flat_map(|_| [1.0].into_iter().chain(std::iter::repeat(0.0).take(15))).collect();
        let eps = standard_normal(&mut r, b * 16);
        let times: Vec<f64> = (0..b).map(|_| r.gen()).collect();
        let mut g = Graph::new();
        let loss = latent_loss(&den, &mut g, &store, &s, &r0, &vec![Modality::Text; b], &times, &eps).unwrap();
        // ||eps||^2 ~ chi^2_16: mean 16, variance 32.
        let sigma = (32.0 / b as f64).sqrt();
        assert!((g.scalar(loss) - 16.0).abs() < 3.0 * sigma, "{}", g.scalar(loss));
    }

    #[test]
    fn two_step_drift_matches_hand_recursion() {
        let s = NoiseSchedule { num_latent_steps: 2, ..Default::default() };
        let den = Linear { d: 3, scale: 0.5 };
        let store = ParamStore::new();
        let opts = AncestralOptions { suppress_noise: true };
        let out = ancestral_sample_raw(&den, &store, &s, &[Modality::Image], opts, &mut rng::stream(9, "a")).unwrap();
        let start = standard_normal(&mut rng::stream(9, "a"), 3);
        let ab = |t: f64| (-(0.1 * t + 0.5 * 19.9 * t * t)).exp();
        let mut x = start;
        for (t, tp) in [(1.0, 0.5), (0.5, 0.0)] {
            let alpha = ab(t) / ab(tp);
            let coef = (1.0 - alpha) / (1.0 - ab(t)).sqrt();
            x = x.iter().map(|v| (v - coef * 0.5 * v) / alpha.sqrt()).collect();
        }
        for (a, b) in out[0].iter().zip(&x) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn sampling_is_deterministic_and_normalized() {
        let s = NoiseSchedule { num_latent_steps: 10, ..Default::default() };
        let den = Linear { d: 4, scale: 0.1 };
        let store = ParamStore::new();
        let m = [Modality::Text, Modality::Image];
        let a = ancestral_sample(&den, &store, &s, &m, &mut rng::stream(1, "s")).unwrap();
        let b = ancestral_sample(&den, &store, &s, &m, &mut rng::stream(1, "s")).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
        assert_eq!(a[1].modality(), Modality::Image);
    }
}
