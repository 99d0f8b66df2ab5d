use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{linear, normal_init, sinusoidal_features, EpsDenoiser, TimeEmbedding};
use crate::modality::Modality;
use crate::tensor::{Graph, ParamStore, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentDenoiserConfig {
    pub hidden: Vec<usize>,
    pub dim: usize,
    pub time_features: usize,
    pub time_embedding: TimeEmbedding,
}

impl Default for LatentDenoiserConfig {
    fn default() -> Self {
        LatentDenoiserConfig {
            hidden: vec![64, 64],
            dim: 16,
            time_features: 32,
            time_embedding: TimeEmbedding::Sinusoidal,
        }
    }
}

impl LatentDenoiserConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err("hidden widths must be non-empty and positive".into());
        }
        if self.dim == 0 || self.time_features < 2 {
            return Err("dim must be positive and time_features at least 2".into());
        }
        Ok(())
    }
}

/// MLP `eps_phi(r_t, t, c_m)`. Every hidden layer receives a time embedding
/// plus a learned modality embedding.
#[derive(Debug, Clone)]
pub struct LatentDenoiser {
    pub config: LatentDenoiserConfig,
}

impl LatentDenoiser {
    pub fn new(config: LatentDenoiserConfig) -> Self {
        LatentDenoiser { config }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let c = &self.config;
        let mut fan_in = c.dim;
        for (i, &w) in c.hidden.iter().enumerate() {
            store.insert(format!("lat.l{i}.w"), normal_init(rng, &[fan_in, w], 1.0 / (fan_in as f64).sqrt()))?;
            store.insert(format!("lat.l{i}.b"), Tensor::zeros(vec![w]))?;
            store.insert(
                format!("lat.l{i}.time"),
                normal_init(rng, &[c.time_features, w], 1.0 / (c.time_features as f64).sqrt()),
            )?;
            store.insert(format!("lat.l{i}.modality"), normal_init(rng, &[2, w], 0.5))?;
            fan_in = w;
        }
        store.insert("lat.out.w", normal_init(rng, &[fan_in, c.dim], 0.1 / (fan_in as f64).sqrt()))?;
        store.insert("lat.out.b", Tensor::zeros(vec![c.dim]))?;
        Ok(())
    }
}

impl EpsDenoiser for LatentDenoiser {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn predict(&self, g: &mut Graph, store: &ParamStore, r_t: Var, times: &[f64], modality: &[Modality]) -> Result<Var> {
        let c = &self.config;
        let b = times.len();
        if g.shape(r_t) != [b, c.dim] || modality.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "eps_predict",
                node: g.len(),
                lhs: g.shape(r_t).to_vec(),
                rhs: vec![b, c.dim],
            });
        }
        let feats = g.constant(sinusoidal_features(times, c.time_features));
        let picks: Vec<(usize, usize)> = modality.iter().map(|m| (0, m.id())).collect();
        let mut h = r_t;
        for i in 0..c.hidden.len() {
            let x = linear(g, store, h, &format!("lat.l{i}.w"), &format!("lat.l{i}.b"))?;
            let tw = g.param(store, &format!("lat.l{i}.time"))?;
            let temb = g.matmul(feats, tw)?;
            let table = g.param(store, &format!("lat.l{i}.modality"))?;
            let memb = g.select_rows(&[table], &picks)?;
            let cond = g.add(temb, memb)?;
            let x = g.add(x, cond)?;
            h = g.gelu(x)?;
        }
        linear(g, store, h, "lat.out.w", "lat.out.b")
    }
}
