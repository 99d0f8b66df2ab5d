//! The two learnable networks and the traits samplers and losses use to call
//! them, so tests can swap in rigged denoisers.

mod discrete;
mod latent;

pub use discrete::{DenoiserOutput, DiscreteDenoiser, DiscreteDenoiserConfig};
pub use latent::{LatentDenoiser, LatentDenoiserConfig};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::modality::Modality;
use crate::tensor::{Graph, ParamStore, Result, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeEmbedding {
    #[default]
    Sinusoidal,
}

/// How the semantic condition reaches the token denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Injection {
    /// `Proj(r)` is prepended at position 0 and attended to.
    Active,
    /// Position 0 is present but no position may attend to it.
    Masked,
    /// No position 0 at all.
    Absent,
}

/// One batched call of a token denoiser. All sequences share modality and
/// length.
pub struct DenoiseInput<'a> {
    pub modality: Modality,
    pub tokens: Vec<&'a [u32]>,
    pub times: &'a [f64],
    /// `[B, d]` semantic condition; required unless injection is `Absent`.
    pub cond: Option<Var>,
    pub injection: Injection,
}

impl DenoiseInput<'_> {
    pub fn batch(&self) -> usize {
        self.tokens.len()
    }

    pub fn len(&self) -> usize {
        self.tokens.first().map_or(0, |t| t.len())
    }
}

/// Produces `[B * L, V]` logits over the modality's vocabulary.
pub trait TokenDenoiser {
    fn vocab(&self, modality: Modality) -> usize;
    fn logits(&self, g: &mut Graph, store: &ParamStore, input: &DenoiseInput<'_>) -> Result<Var>;
}

/// Predicts the noise `eps` from `(r_t, t, c_m)`; returns `[B, d]`.
pub trait EpsDenoiser {
    fn dim(&self) -> usize;
    fn predict(&self, g: &mut Graph, store: &ParamStore, r_t: Var, times: &[f64], modality: &[Modality]) -> Result<Var>;
}

/// Transformer-style sinusoidal features of `t` in `[0, 1]`, `[B, width]`.
pub fn sinusoidal_features(times: &[f64], width: usize) -> Tensor {
    let half = width / 2;
    let mut data = Vec::with_capacity(times.len() * width);
    for &t in times {
        let pos = t * 1000.0;
        for i in 0..width {
            let k = (i % half.max(1)) as f64;
            let freq = (-(10_000f64.ln()) * k / half.max(1) as f64).exp();
            data.push(if i < half { (pos * freq).sin() } else { (pos * freq).cos() });
        }
    }
    Tensor::new(vec![times.len(), width], data).expect("sinusoidal shape")
}

pub(crate) fn normal_init<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std must be positive");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

pub(crate) fn uniform_init<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
}

/// `x W + b` with `W` and `b` looked up by name.
pub(crate) fn linear(g: &mut Graph, store: &ParamStore, x: Var, w: &str, b: &str) -> Result<Var> {
    let wv = g.param(store, w)?;
    let bv = g.param(store, b)?;
    let y = g.matmul(x, wv)?;
    g.add_bias(y, bv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoidal_is_bounded_and_time_sensitive() {
        let f = sinusoidal_features(&[0.0, 0.5], 8);
        assert_eq!(f.shape(), &[2, 8]);
        assert!(f.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(&f.data()[..8], &f.data()[8..]);
    }
}
