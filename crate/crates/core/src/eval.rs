//! Measurements: BLEU and Self-BLEU, the Monte-Carlo bound on the chain
//! likelihood, cross-modal factor recovery, unmasking order and decode cost.

use std::collections::{BTreeMap, HashMap};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::{adapt, AdapterDirection, BridgeError, Encoders};
use crate::datagen::{Corpus, ToyWorld};
use crate::discrete::{sample_batch, DiffusionError, SampleRun, SamplerSettings, TokenSequence, TrajectoryStep, MASK};
use crate::latent::SemanticVector;
use crate::modality::Modality;
use crate::nets::{DenoiseInput, Injection, TokenDenoiser};
use crate::rng;
use crate::schedules::NoiseSchedule;
use crate::tensor::{Graph, ParamStore};

const BLEU_SMOOTHING: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0}")]
    Invalid(String),
    #[error("metric {0} is not finite")]
    NonFinite(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

type Counts = HashMap<Vec<u32>, usize>;

fn ngram_counts(seq: &[u32], n: usize) -> Counts {
    let mut c = Counts::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *c.entry(w.to_vec()).or_default() += 1;
        }
    }
    c
}

/// Per-order maximum reference counts, shared by every candidate scored
/// against the same reference set.
struct RefTable {
    max_counts: Vec<Counts>,
    lengths: Vec<usize>,
}

impl RefTable {
    fn new(refs: &[&[u32]], n: usize) -> Self {
        let mut max_counts = vec![Counts::new(); n];
        for r in refs {
            for (k, table) in max_counts.iter_mut().enumerate() {
                for (g, c) in ngram_counts(r, k + 1) {
                    let e = table.entry(g).or_default();
                    *e = (*e).max(c);
                }
            }
        }
        RefTable {
            max_counts,
            lengths: refs.iter().map(|r| r.len()).collect(),
        }
    }

    fn closest_length(&self, c: usize) -> usize {
        *self
            .lengths
            .iter()
            .min_by_key(|&&r| (r.abs_diff(c), r))
            .expect("references are non-empty")
    }
}

#[derive(Default)]
struct BleuStats {
    matched: Vec<usize>,
    total: Vec<usize>,
    cand_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn new(n: usize) -> Self {
        BleuStats {
            matched: vec![0; n],
            total: vec![0; n],
            ..Default::default()
        }
    }

    fn add(&mut self, cand: &[u32], refs: &RefTable) {
        if cand.is_empty() {
            return;
        }
        for k in 0..self.matched.len() {
            for (g, c) in ngram_counts(cand, k + 1) {
                let cap = refs.max_counts[k].get(&g).copied().unwrap_or(0);
                self.matched[k] += c.min(cap);
                self.total[k] += c;
            }
        }
        self.cand_len += cand.len();
        self.ref_len += refs.closest_length(cand.len());
    }

    fn score(&self) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        let n = self.matched.len() as f64;
        let log_p: f64 = self
            .matched
            .iter()
            .zip(&self.total)
            .map(|(&m, &t)| {
                let p = if t == 0 || m == 0 { BLEU_SMOOTHING } else { m as f64 / t as f64 };
                p.ln()
            })
            .sum::<f64>()
            / n;
        let (c, r) = (self.cand_len as f64, self.ref_len as f64);
        let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
        100.0 * bp * log_p.exp()
    }
}

/// Corpus BLEU in percent; each candidate is clipped against its own
/// reference list.
pub fn bleu_n(candidates: &[&[u32]], references: &[Vec<&[u32]>], n: usize) -> Result<f64> {
    if n == 0 || candidates.is_empty() || candidates.len() != references.len() || references.iter().any(|r| r.is_empty()) {
        return Err(EvalError::Invalid("bleu needs n >= 1 and a non-empty reference list per candidate".into()));
    }
    let mut stats = BleuStats::new(n);
    for (c, refs) in candidates.iter().zip(references) {
        stats.add(c, &RefTable::new(refs, n));
    }
    Ok(stats.score())
}

/// Corpus BLEU with one reference set shared by all candidates.
pub fn bleu_shared(candidates: &[&[u32]], references: &[&[u32]], n: usize) -> Result<f64> {
    if n == 0 || candidates.is_empty() || references.is_empty() {
        return Err(EvalError::Invalid("bleu needs n >= 1 and non-empty inputs".into()));
    }
    let table = RefTable::new(references, n);
    let mut stats = BleuStats::new(n);
    for c in candidates {
        stats.add(c, &table);
    }
    Ok(stats.score())
}

/// Mean over samples of the BLEU of each sample against all the others.
pub fn self_bleu(samples: &[&[u32]], n: usize) -> Result<f64> {
    if samples.len() < 2 {
        return Err(EvalError::Invalid("self-BLEU needs at least two samples".into()));
    }
    let mut total = 0.0;
    for i in 0..samples.len() {
        let others: Vec<&[u32]> = samples.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, s)| *s).collect();
        total += bleu_shared(&samples[i..=i], &others, n)?;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

fn mean_and_se(xs: &[f64]) -> Estimate {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return Estimate { mean, stderr: 0.0 };
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Estimate { mean, stderr: (var / n).sqrt() }
}

/// Monte-Carlo lower bound on `log p(x | r)` under the `steps`-step chain
/// with the random policy.
///
/// With the uniform-ordering variational distribution, the state before
/// step `k` is a uniformly random mask set of size `m_k` and the committed
/// subset is uniform within it, so one draw of `(k, M)` gives the unbiased
/// term `K n_k mean_{i in M} log p_k(x_i | x_{not M})`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_estimate<D: TokenDenoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    x: &TokenSequence,
    cond: Option<&SemanticVector>,
    injection: Injection,
    steps: usize,
    num_mc: usize,
    rng: &mut R,
) -> Result<Estimate> {
    if num_mc == 0 {
        return Err(EvalError::Invalid("num_mc must be at least 1".into()));
    }
    let len = x.len();
    if x.content_len() != len || x.has_mask() {
        return Err(EvalError::Invalid("elbo needs a fully observed, unpadded sequence".into()));
    }
    let budgets = schedule.unmask_budget(len, steps).map_err(DiffusionError::from)?;
    let grid = NoiseSchedule::reverse_grid(steps);
    let vocab = denoiser.vocab(x.modality());
    let mut remaining = vec![len];
    for &n in &budgets {
        remaining.push(remaining.last().unwrap() - n);
    }
    let mut draws = Vec::with_capacity(num_mc);
    let chunk = 256;
    let mut done = 0;
    while done < num_mc {
        let b = chunk.min(num_mc - done);
        let mut ks = Vec::with_capacity(b);
        let mut masks = Vec::with_capacity(b);
        let mut seqs = Vec::with_capacity(b);
        for _ in 0..b {
            let k = rng.gen_range(0..steps);
            let m = index::sample(rng, len, remaining[k]).into_vec();
            let mut tokens = x.tokens().to_vec();
            for &p in &m {
                tokens[p] = MASK;
            }
            ks.push(k);
            masks.push(m);
            seqs.push(tokens);
        }
        let times: Vec<f64> = ks.iter().map(|&k| grid[k]).collect();
        let mut g = Graph::new();
        let cond_var = match cond {
            Some(c) if injection != Injection::Absent => {
                let rows = vec![c; b];
                Some(g.constant(SemanticVector::stack(&rows).map_err(|e| EvalError::Invalid(e.to_string()))?))
            }
            _ => None,
        };
        let input = DenoiseInput {
            modality: x.modality(),
            tokens: seqs.iter().map(|s| s.as_slice()).collect(),
            times: &times,
            cond: cond_var,
            injection,
        };
        let logits = denoiser.logits(&mut g, store, &input).map_err(DiffusionError::from)?;
        let logp = g.log_softmax(logits).map_err(DiffusionError::from)?;
        let lp = g.value(logp);
        for i in 0..b {
            let m = &masks[i];
            let mean: f64 = m.iter().map(|&p| lp[(i * len + p) * vocab + x.tokens()[p] as usize]).sum::<f64>() / m.len() as f64;
            draws.push(steps as f64 * budgets[ks[i]] as f64 * mean);
        }
        done += b;
    }
    Ok(mean_and_se(&draws))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossModalReport {
    /// Images sampled from `adapt(encode(text twin))` whose factor matches.
    pub cross_accuracy: f64,
    /// Images sampled from their own encoding whose factor matches.
    pub self_accuracy: f64,
    pub pairs: usize,
}

/// Text-to-image factor recovery on held-out pairs.
#[allow(clippy::too_many_arguments)]
pub fn cross_modal_score<D: TokenDenoiser + ?Sized>(
    denoiser: &D,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    encoders: &Encoders,
    corpus: &Corpus,
    pairs: &[(usize, usize)],
    settings: &SamplerSettings,
    seed: u64,
) -> Result<CrossModalReport> {
    if pairs.is_empty() {
        return Err(EvalError::Invalid("no held-out pairs".into()));
    }
    let world = &corpus.world;
    let len = world.len(Modality::Image);
    let mut cross = Vec::with_capacity(pairs.len());
    let mut own = Vec::with_capacity(pairs.len());
    for &(t, i) in pairs {
        let rt = encoders.encode(&corpus.records[t].tokens)?;
        cross.push(adapt(store, &rt, AdapterDirection::TextToImage)?);
        own.push(encoders.encode(&corpus.records[i].tokens)?);
    }
    let score = |conds: &[SemanticVector], label: &str| -> Result<f64> {
        let mut rngs: Vec<rng::Rng> = (0..conds.len()).map(|j| rng::substream(seed, label, j as u64)).collect();
        let runs = sample_batch(denoiser, store, schedule, Modality::Image, len, Some(conds), settings, &mut rngs)?;
        let hits = runs
            .iter()
            .zip(pairs)
            .filter(|(run, &(_, i))| {
                world.recover_factor(&run.sequence, world.default_min_matches(Modality::Image)) == Some(corpus.records[i].factor as usize)
            })
            .count();
        Ok(hits as f64 / pairs.len() as f64)
    };
    Ok(CrossModalReport {
        cross_accuracy: score(&cross, "eval.cross_modal")?,
        self_accuracy: score(&own, "eval.self_modal")?,
        pairs: pairs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderStats {
    pub content_mean_step: f64,
    pub filler_mean_step: f64,
    /// Mean over samples of (filler mean step - content mean step).
    pub gap: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub samples: usize,
}

/// Commit-step timing of content versus filler positions, with a percentile
/// bootstrap 95% interval for the mean per-sample gap.
pub fn unmask_order_stats<R: Rng + ?Sized>(
    trajectories: &[&[TrajectoryStep]],
    world: &ToyWorld,
    modality: Modality,
    bootstrap: usize,
    rng: &mut R,
) -> Result<OrderStats> {
    if trajectories.is_empty() || bootstrap == 0 {
        return Err(EvalError::Invalid("need trajectories and bootstrap resamples".into()));
    }
    let (mut content, mut filler) = ((0.0, 0usize), (0.0, 0usize));
    let mut gaps = Vec::with_capacity(trajectories.len());
    for traj in trajectories {
        let (mut c, mut f) = ((0.0, 0usize), (0.0, 0usize));
        for rec in traj.iter() {
            for &p in &rec.positions {
                let slot = if world.is_content(modality, p) { &mut c } else { &mut f };
                slot.0 += rec.step as f64;
                slot.1 += 1;
            }
        }
        if c.1 == 0 || f.1 == 0 {
            return Err(EvalError::Invalid("trajectory lacks content or filler positions".into()));
        }
        content = (content.0 + c.0, content.1 + c.1);
        filler = (filler.0 + f.0, filler.1 + f.1);
        gaps.push(f.0 / f.1 as f64 - c.0 / c.1 as f64);
    }
    let n = gaps.len();
    let gap = gaps.iter().sum::<f64>() / n as f64;
    let mut means: Vec<f64> = (0..bootstrap)
        .map(|_| (0..n).map(|_| gaps[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (bootstrap - 1) as f64).round() as usize).min(bootstrap - 1)];
    Ok(OrderStats {
        content_mean_step: content.0 / content.1 as f64,
        filler_mean_step: filler.0 / filler.1 as f64,
        gap,
        ci_low: at(0.025),
        ci_high: at(0.975),
        samples: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeCost {
    pub evaluations: usize,
    pub tokens: usize,
    pub tokens_per_evaluation: f64,
}

pub fn decode_cost(run: &SampleRun) -> DecodeCost {
    let tokens: usize = run.trajectory.iter().map(|r| r.positions.len()).sum();
    DecodeCost {
        evaluations: run.evaluations,
        tokens,
        tokens_per_evaluation: tokens as f64 / run.evaluations.max(1) as f64,
    }
}

/// Named metrics plus the settings that produced them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub settings: BTreeMap<String, serde_json::Value>,
    /// `(step, metric, value)` rows for convergence plots.
    pub series: Vec<(usize, String, f64)>,
}

impl EvalReport {
    pub fn insert(&mut self, name: impl Into<String>, value: f64) -> Result<()> {
        let name = name.into();
        if !value.is_finite() {
            return Err(EvalError::NonFinite(name));
        }
        self.metrics.insert(name, value);
        Ok(())
    }

    pub fn setting(&mut self, name: impl Into<String>, value: impl Serialize) {
        self.settings.insert(name.into(), serde_json::to_value(value).expect("settings serialize"));
    }

    pub fn push_series(&mut self, step: usize, metric: impl Into<String>, value: f64) -> Result<()> {
        let metric = metric.into();
        if !value.is_finite() {
            return Err(EvalError::NonFinite(metric));
        }
        self.series.push((step, metric, value));
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Tab-separated `step metric value`; final metrics use step `-`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step\tmetric\tvalue\n");
        for (step, m, v) in &self.series {
            out.push_str(&format!("{step}\t{m}\t{v}\n"));
        }
        for (m, v) in &self.metrics {
            out.push_str(&format!("-\t{m}\t{v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<u32> {
        s.split_whitespace().map(|w| w.bytes().next().unwrap() as u32).collect()
    }

    #[test]
    fn bleu_hand_example() {
        let c = toks("a b c d");
        let r = toks("a b c e");
        let score = bleu_n(&[&c], &[vec![&r]], 2).unwrap();
        assert!((score - 100.0 * (0.75f64 * 2.0 / 3.0).sqrt()).abs() < 1e-9);
        assert!((score - 70.71).abs() < 5e-3);
    }

    #[test]
    fn bleu_extremes() {
        let a = toks("a b c d e");
        assert!((bleu_n(&[&a], &[vec![&a]], 4).unwrap() - 100.0).abs() < 1e-9);
        let z = toks("v w x y z");
        assert!(bleu_n(&[&a], &[vec![&z]], 2).unwrap() < 1e-6);
        assert!(bleu_n(&[], &[], 2).is_err());
    }

    #[test]
    fn brevity_penalty_uses_closest_reference() {
        let c = toks("a b");
        let r = toks("a b c d");
        let score = bleu_n(&[&c], &[vec![&r]], 1).unwrap();
        assert!((score - 100.0 * (1.0f64 - 2.0).exp()).abs() < 1e-9);
    }

    #[test]
    fn self_bleu_cases() {
        let a = toks("a b c d");
        assert!((self_bleu(&[&a, &a, &a], 2).unwrap() - 100.0).abs() < 1e-9);
        let (b, c) = (toks("e f g h"), toks("i j k l"));
        assert!(self_bleu(&[&a, &b, &c], 2).unwrap() < 1e-6);
        // Unigram self-BLEU: "a b c d" vs {"a b x y", "p q r s"} matches 2/4, and
        // symmetric for the second; the third matches nothing.
        let (x, y, z) = (toks("a b c d"), toks("a b x y"), toks("p q r s"));
        let expected = (50.0 + 50.0 + 100.0 * BLEU_SMOOTHING) / 3.0;
        assert!((self_bleu(&[&x, &y, &z], 1).unwrap() - expected).abs() < 1e-9);
        assert!(self_bleu(&[&a], 2).is_err());
    }

    #[test]
    fn decode_cost_counts() {
        let step = |k: usize, n: usize| TrajectoryStep { step: k, time: 0.0, positions: (0..n).collect(), tokens: vec![0; n], confidence: vec![1.0; n] };
        let run = SampleRun {
            sequence: TokenSequence::new(vec![0; 256], Modality::Text, 2).unwrap(),
            trajectory: (0..20).map(|k| step(k, if k < 16 { 13 } else { 12 })).collect(),
            evaluations: 20,
        };
        let c = decode_cost(&run);
        assert_eq!((c.evaluations, c.tokens), (20, 256));
        assert!((c.tokens_per_evaluation - 12.8).abs() < 1e-12);
    }

    #[test]
    fn report_rejects_non_finite_and_renders() {
        let mut r = EvalReport::default();
        assert!(r.insert("bad", f64::NAN).is_err());
        r.insert("bleu2", 50.0).unwrap();
        r.push_series(50, "loss", 1.5).unwrap();
        assert_eq!(r.to_tsv(), "step\tmetric\tvalue\n50\tloss\t1.5\n-\tbleu2\t50\n");
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
