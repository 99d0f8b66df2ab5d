//! Two-stage training: the latent prior first, then the token denoiser with
//! the prior frozen. AdamW with decoupled weight decay, JSONL loss traces.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::{adapt_var, init_adapters, AdapterDirection, BridgeError, Encoders};
use crate::datagen::{make_batch, Corpus, DataError, Split};
use crate::discrete::{corrupt_with_rate, discrete_loss, CorruptionState, DiffusionError, LossReduction, TokenSequence};
use crate::latent::{latent_loss, standard_normal, LatentError, SemanticVector};
use crate::modality::Modality;
use crate::nets::{DiscreteDenoiser, EpsDenoiser, Injection, LatentDenoiser, TokenDenoiser};
use crate::rng;
use crate::schedules::{NoiseSchedule, ScheduleError};
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("parameter {0} has no gradient")]
    MissingGradient(String),
    #[error("non-finite {stage} loss at step {step}")]
    NonFinite {
        stage: Stage,
        step: usize,
        /// Parameters as they were when the bad loss was computed.
        snapshot: Box<ParamStore>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Latent,
    Discrete,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Latent => "latent",
            Stage::Discrete => "discrete",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Filled from the experiment seed table, never read from config text.
    #[serde(skip)]
    pub seed: u64,
    pub log_every: usize,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub no_injection: bool,
    pub fixed_mask_rate: Option<f64>,
    pub loss_reduction: LossReduction,
    /// Batch-kind weights (text only, image only, paired).
    pub mix: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 5000,
            batch_size: 32,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            log_every: 50,
            checkpoint_every: 0,
            no_injection: false,
            fixed_mask_rate: None,
            loss_reduction: LossReduction::Mean,
            mix: [2.0, 2.0, 1.0],
        }
    }
}

impl TrainConfig {
    pub fn latent_default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 64,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return bad("batch_size and log_every must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 || self.weight_decay < 0.0 {
            return bad("betas must lie in [0, 1), epsilon > 0, weight_decay >= 0".into());
        }
        if let Some(r) = self.fixed_mask_rate {
            if !(r > 0.0 && r <= 1.0) {
                return bad(format!("fixed_mask_rate must lie in (0, 1], got {r}"));
            }
        }
        if self.mix.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.mix.iter().sum::<f64>() <= 0.0 {
            return bad("mix weights must be non-negative with a positive sum".into());
        }
        Ok(())
    }
}

/// AdamW with bias correction and decoupled weight decay applied to every entry.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: &TrainConfig) -> Self {
        AdamW {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            weight_decay: config.weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, bumps the store
    /// version once and zeroes every gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some((name, _)) = store.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(TrainError::MissingGradient(name.to_string()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, t) in store.iter_mut() {
            let g = t.grad().expect("checked above").to_vec();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.epsilon);
                *p -= self.learning_rate * (update + self.weight_decay * *p);
            }
        }
        store.bump_version();
        store.zero_grads();
        Ok(())
    }

    /// Moment buffers as a store (`m.<name>`, `v.<name>`) for checkpoints.
    pub fn state(&self) -> Result<ParamStore> {
        let mut out = ParamStore::new();
        for (name, (m, v)) in &self.moments {
            out.insert(format!("m.{name}"), Tensor::new(vec![m.len()], m.clone())?)?;
            out.insert(format!("v.{name}"), Tensor::new(vec![v.len()], v.clone())?)?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub stage: Stage,
    /// Mean loss over the steps since the previous record.
    pub loss: f64,
    /// Mean fraction of maskable positions that were masked (token stage).
    pub masked_fraction: Option<f64>,
}

/// Called with `(steps completed, params, optimizer)` at checkpoint intervals
/// and once more after the last step.
pub type CheckpointHook<'a> = dyn FnMut(usize, &ParamStore, &AdamW) -> std::io::Result<()> + 'a;

struct Window {
    loss: f64,
    masked: f64,
    count: usize,
}

impl Window {
    fn new() -> Self {
        Window { loss: 0.0, masked: 0.0, count: 0 }
    }

    fn push(&mut self, loss: f64, masked: f64) {
        self.loss += loss;
        self.masked += masked;
        self.count += 1;
    }

    fn flush(&mut self, step: usize, stage: Stage) -> Option<TraceRecord> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        let rec = TraceRecord {
            step,
            stage,
            loss: self.loss / n,
            masked_fraction: (stage == Stage::Discrete).then_some(self.masked / n),
        };
        *self = Window::new();
        Some(rec)
    }
}

fn run_checkpoint(hook: &mut Option<&mut CheckpointHook<'_>>, config: &TrainConfig, step: usize, store: &ParamStore, opt: &AdamW) -> Result<()> {
    if let Some(h) = hook.as_mut() {
        let every = config.checkpoint_every;
        if (every > 0 && step % every == 0) || step == config.iterations {
            h(step, store, opt).map_err(TensorError::from)?;
        }
    }
    Ok(())
}

/// Fresh Stage I parameters.
pub fn init_latent(denoiser: &LatentDenoiser, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    denoiser.init_params(&mut store, &mut rng::stream(seed, "init.latent"))?;
    Ok(store)
}

/// Fresh Stage II parameters: denoiser, injection projection and adapters.
pub fn init_discrete(denoiser: &DiscreteDenoiser, seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, "init.discrete");
    denoiser.init_params(&mut store, &mut r)?;
    init_adapters(&mut store, denoiser.config.semantic_dim, 0.0, &mut r)?;
    Ok(store)
}

/// Stage I: fits the epsilon-predictor to the given unit-norm
/// representations with `t ~ U[0, 1]` per item.
pub fn train_stage1<D: EpsDenoiser + ?Sized>(
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    denoiser: &D,
    data: &[SemanticVector],
    store: &mut ParamStore,
    mut hook: Option<&mut CheckpointHook<'_>>,
) -> Result<Vec<TraceRecord>> {
    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::Config("no representations to train on".into()));
    }
    let d = denoiser.dim();
    let mut opt = AdamW::new(config);
    let mut trace = Vec::new();
    let mut window = Window::new();
    store.zero_grads();
    for step in 0..config.iterations {
        let mut r = rng::substream(config.seed, "stage1.step", step as u64);
        let b = config.batch_size;
        let mut r0 = Vec::with_capacity(b * d);
        let mut modality = Vec::with_capacity(b);
        for _ in 0..b {
            let v = &data[r.gen_range(0..data.len())];
            r0.extend_from_slice(v.values());
            modality.push(v.modality());
        }
        let times: Vec<f64> = (0..b).map(|_| r.gen()).collect();
        let eps = standard_normal(&mut r, b * d);
        let mut g = Graph::new();
        let loss = latent_loss(denoiser, &mut g, store, schedule, &r0, &modality, &times, &eps);
        let loss = match loss {
            Ok(l) => l,
            Err(LatentError::Tensor(TensorError::NonFinite { .. })) => {
                return Err(TrainError::NonFinite { stage: Stage::Latent, step, snapshot: Box::new(store.clone()) })
            }
            Err(e) => return Err(e.into()),
        };
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(TrainError::NonFinite { stage: Stage::Latent, step, snapshot: Box::new(store.clone()) });
        }
        g.backward(loss, store)?;
        opt.step(store)?;
        window.push(value, 0.0);
        if (step + 1) % config.log_every == 0 || step + 1 == config.iterations {
            trace.extend(window.flush(step + 1, Stage::Latent));
        }
        run_checkpoint(&mut hook, config, step + 1, store, &opt)?;
    }
    Ok(trace)
}

/// Encodings of every record, computed once (encoders are frozen).
pub fn encode_corpus(corpus: &Corpus, encoders: &Encoders) -> Result<Vec<SemanticVector>> {
    Ok(corpus
        .records
        .iter()
        .map(|r| encoders.encode(&r.tokens))
        .collect::<std::result::Result<_, _>>()?)
}

/// Encodings of the training split, the Stage I training set.
pub fn stage1_data(corpus: &Corpus, encodings: &[SemanticVector]) -> Vec<SemanticVector> {
    corpus
        .records
        .iter()
        .zip(encodings)
        .filter(|(r, _)| r.split == Split::Train)
        .map(|(_, e)| e.clone())
        .collect()
}

/// Loss of one Stage II batch, built into `g`. Returns the combined loss (if
/// any position was masked) and the masked fraction.
#[allow(clippy::too_many_arguments)]
pub fn stage2_batch_loss<D: TokenDenoiser + ?Sized, R: Rng>(
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    denoiser: &D,
    corpus: &Corpus,
    encodings: &[SemanticVector],
    store: &ParamStore,
    g: &mut Graph,
    rng: &mut R,
) -> Result<(Option<Var>, f64)> {
    let batch = make_batch(corpus, config.mix, config.batch_size, rng)?;
    let injection = if config.no_injection { Injection::Masked } else { Injection::Active };
    let fixed_time = match config.fixed_mask_rate {
        Some(rate) => Some((rate, schedule.gamma_inverse(rate)?)),
        None => None,
    };
    let mut states: Vec<CorruptionState> = Vec::with_capacity(batch.items.len());
    let (mut masked, mut maskable) = (0usize, 0usize);
    for it in &batch.items {
        let x0 = &corpus.records[it.target].tokens;
        let (rate, time) = match fixed_time {
            Some(ft) => ft,
            None => {
                let t: f64 = rng.gen();
                (schedule.gamma_at(t)?, t)
            }
        };
        let st = corrupt_with_rate(x0, rate, time, rng)?;
        masked += st.mask_set.len();
        maskable += x0.content_len();
        states.push(st);
    }
    let mut parts: Vec<(Var, usize)> = Vec::new();
    for m in Modality::ALL {
        let idx: Vec<usize> = (0..batch.items.len()).filter(|&i| corpus.records[batch.items[i].target].modality == m).collect();
        if idx.is_empty() {
            continue;
        }
        let swapped = batch.items[idx[0]].swap_applied;
        let sources: Vec<&SemanticVector> = idx.iter().map(|&i| &encodings[batch.items[i].source]).collect();
        let cond = g.constant(SemanticVector::stack(&sources)?);
        let cond = if swapped { adapt_var(g, store, cond, AdapterDirection::from_source(m.other()))? } else { cond };
        let items: Vec<(&TokenSequence, &CorruptionState)> = idx.iter().map(|&i| (&corpus.records[batch.items[i].target].tokens, &states[i])).collect();
        let out = discrete_loss(denoiser, g, store, &items, Some(cond), injection, config.loss_reduction)?;
        if let Some(l) = out.loss {
            parts.push((l, out.contributing_items));
        }
    }
    let total: usize = parts.iter().map(|p| p.1).sum();
    let mut loss = None;
    for (l, c) in parts {
        let scaled = g.scale(l, c as f64 / total as f64)?;
        loss = Some(match loss {
            None => scaled,
            Some(acc) => g.add(acc, scaled)?,
        });
    }
    let frac = if maskable == 0 { 0.0 } else { masked as f64 / maskable as f64 };
    Ok((loss, frac))
}

/// Stage II: the token denoiser, injection projection and adapters train
/// jointly on mixed batches. The Stage I store is not touched.
#[allow(clippy::too_many_arguments)]
pub fn train_stage2<D: TokenDenoiser + ?Sized>(
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    denoiser: &D,
    corpus: &Corpus,
    encodings: &[SemanticVector],
    store: &mut ParamStore,
    mut hook: Option<&mut CheckpointHook<'_>>,
) -> Result<Vec<TraceRecord>> {
    config.validate()?;
    if encodings.len() != corpus.records.len() {
        return Err(TrainError::Config("one encoding per corpus record is required".into()));
    }
    let mut opt = AdamW::new(config);
    let mut trace = Vec::new();
    let mut window = Window::new();
    if config.iterations > 0 {
        store.zero_grads();
    }
    for step in 0..config.iterations {
        let mut r = rng::substream(config.seed, "stage2.step", step as u64);
        let mut g = Graph::new();
        let built = stage2_batch_loss(config, schedule, denoiser, corpus, encodings, store, &mut g, &mut r);
        let (loss, frac) = match built {
            Ok(v) => v,
            Err(TrainError::Tensor(TensorError::NonFinite { .. })) | Err(TrainError::Diffusion(DiffusionError::Tensor(TensorError::NonFinite { .. }))) => {
                return Err(TrainError::NonFinite { stage: Stage::Discrete, step, snapshot: Box::new(store.clone()) })
            }
            Err(e) => return Err(e),
        };
        let value = match loss {
            Some(l) => {
                let v = g.scalar(l);
                if !v.is_finite() {
                    return Err(TrainError::NonFinite { stage: Stage::Discrete, step, snapshot: Box::new(store.clone()) });
                }
                g.backward(l, store)?;
                v
            }
            None => 0.0,
        };
        opt.step(store)?;
        window.push(value, frac);
        if (step + 1) % config.log_every == 0 || step + 1 == config.iterations {
            trace.extend(window.flush(step + 1, Stage::Discrete));
        }
        run_checkpoint(&mut hook, config, step + 1, store, &opt)?;
    }
    Ok(trace)
}
