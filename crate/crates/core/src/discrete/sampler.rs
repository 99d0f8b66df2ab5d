use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CorruptionState, DiffusionError, Result, TokenSequence, MASK};
use crate::latent::SemanticVector;
use crate::modality::Modality;
use crate::nets::{DenoiseInput, Injection, TokenDenoiser};
use crate::schedules::NoiseSchedule;
use crate::tensor::{kernels, Graph, ParamStore};

/// Which sampled candidates a reverse step commits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnmaskPolicy {
    /// Highest candidate probability first, lowest position on ties.
    #[default]
    Confidence,
    /// Uniformly random subset of the masked positions.
    Random,
    /// Lowest masked positions first.
    LeftToRight,
}

impl std::str::FromStr for UnmaskPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "confidence" => Ok(UnmaskPolicy::Confidence),
            "random" => Ok(UnmaskPolicy::Random),
            "left_to_right" => Ok(UnmaskPolicy::LeftToRight),
            other => Err(format!("unknown policy {other:?} (expected confidence, random or left_to_right)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerSettings {
    pub steps: usize,
    pub policy: UnmaskPolicy,
    /// 0 selects the argmax candidate.
    pub temperature: f64,
    pub injection: Injection,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings {
            steps: 20,
            policy: UnmaskPolicy::Confidence,
            temperature: 1.0,
            injection: Injection::Active,
        }
    }
}

/// One reverse step of one sequence, as written to trajectory logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub step: usize,
    pub time: f64,
    pub positions: Vec<usize>,
    pub tokens: Vec<u32>,
    /// Untempered model probability of each committed token.
    pub confidence: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    pub sequence: TokenSequence,
    pub trajectory: Vec<TrajectoryStep>,
    /// Denoiser evaluations this sequence took part in.
    pub evaluations: usize,
}

fn sample_candidate<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> (usize, f64) {
    let mut probs = vec![0.0; logits.len()];
    kernels::masked_softmax_row(logits, None, &mut probs);
    let choice = if temperature == 0.0 {
        argmax(logits)
    } else {
        let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
        let mut tempered = vec![0.0; logits.len()];
        kernels::masked_softmax_row(&scaled, None, &mut tempered);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = tempered.len() - 1;
        for (i, p) in tempered.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        pick
    };
    (choice, probs[choice])
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

/// Batched reverse step: one denoiser call for all `states`, then each state
/// commits exactly `budgets[i]` of its masked positions. Each sequence draws
/// from its own stream in `rngs`, so results do not depend on batching.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step_batch<D: TokenDenoiser + ?Sized, R: Rng>(
    denoiser: &D,
    store: &ParamStore,
    states: &mut [CorruptionState],
    conds: Option<&[SemanticVector]>,
    budgets: &[usize],
    next_time: f64,
    settings: &SamplerSettings,
    rngs: &mut [R],
) -> Result<Vec<TrajectoryStep>> {
    let b = states.len();
    if b == 0 || budgets.len() != b || rngs.len() != b || conds.is_some_and(|c| c.len() != b) {
        return Err(DiffusionError::RaggedBatch(b));
    }
    if !settings.temperature.is_finite() || settings.temperature < 0.0 {
        return Err(DiffusionError::Temperature(settings.temperature));
    }
    let (modality, len) = (states[0].corrupted.modality(), states[0].corrupted.len());
    for (st, &n) in states.iter().zip(budgets) {
        if st.corrupted.modality() != modality || st.corrupted.len() != len {
            return Err(DiffusionError::RaggedBatch(b));
        }
        st.validate()?;
        if n == 0 {
            return Err(DiffusionError::EmptyBudget);
        }
        if n > st.mask_set.len() {
            return Err(DiffusionError::BudgetExceedsMasks { budget: n, remaining: st.mask_set.len() });
        }
    }
    let vocab = denoiser.vocab(modality);
    let mut g = Graph::new();
    let cond = match (settings.injection, conds) {
        (Injection::Absent, _) | (_, None) => None,
        (_, Some(c)) => {
            let refs: Vec<&SemanticVector> = c.iter().collect();
            let t = SemanticVector::stack(&refs).map_err(|e| DiffusionError::StateMismatch(e.to_string()))?;
            Some(g.constant(t))
        }
    };
    let times: Vec<f64> = states.iter().map(|s| s.time).collect();
    let input = DenoiseInput {
        modality,
        tokens: states.iter().map(|s| s.corrupted.tokens()).collect(),
        times: &times,
        cond,
        injection: settings.injection,
    };
    let logits = denoiser.logits(&mut g, store, &input)?;
    let logits = g.value(logits);

    let mut records = Vec::with_capacity(b);
    for (i, st) in states.iter_mut().enumerate() {
        let rng = &mut rngs[i];
        let masked: Vec<usize> = st.mask_set.iter().copied().collect();
        let candidates: Vec<(usize, f64)> = masked
            .iter()
            .map(|&p| sample_candidate(&logits[(i * len + p) * vocab..][..vocab], settings.temperature, rng))
            .collect();
        let n = budgets[i];
        let mut chosen: Vec<usize> = match settings.policy {
            UnmaskPolicy::LeftToRight => (0..n).collect(),
            UnmaskPolicy::Confidence => {
                let mut order: Vec<usize> = (0..masked.len()).collect();
                order.sort_by(|&a, &b| candidates[b].1.total_cmp(&candidates[a].1).then(masked[a].cmp(&masked[b])));
                order.truncate(n);
                order
            }
            UnmaskPolicy::Random => {
                let mut idx: Vec<usize> = (0..masked.len()).collect();
                for j in 0..n {
                    let k = rng.gen_range(j..idx.len());
                    idx.swap(j, k);
                }
                idx.truncate(n);
                idx
            }
        };
        chosen.sort_by_key(|&j| masked[j]);
        let mut rec = TrajectoryStep {
            step: 0,
            time: st.time,
            positions: Vec::with_capacity(n),
            tokens: Vec::with_capacity(n),
            confidence: Vec::with_capacity(n),
        };
        for j in chosen {
            let (p, (tok, conf)) = (masked[j], candidates[j]);
            st.corrupted.set(p, tok as u32);
            st.mask_set.remove(&p);
            rec.positions.push(p);
            rec.tokens.push(tok as u32);
            rec.confidence.push(conf);
        }
        st.time = next_time;
        records.push(rec);
    }
    Ok(records)
}

/// Single-sequence reverse step.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step<D: TokenDenoiser + ?Sized, R: Rng>(
    denoiser: &D,
    store: &ParamStore,
    state: &mut CorruptionState,
    cond: Option<&SemanticVector>,
    budget: usize,
    next_time: f64,
    settings: &SamplerSettings,
    rng: &mut R,
) -> Result<TrajectoryStep> {
    let conds = cond.map(|c| vec![c.clone()]);
    let states = std::slice::from_mut(state);
    let rngs = std::slice::from_mut(rng);
    let mut rec = reverse_step_batch(denoiser, store, states, conds.as_deref(), &[budget], next_time, settings, rngs)?;
    Ok(rec.remove(0))
}

/// Generates `rngs.len()` sequences of `length` tokens from the fully absorbed
/// state, batching the denoiser over sequences: exactly `settings.steps`
/// denoiser calls in total.
#[allow(clippy::too_many_arguments)]
pub fn sample_batch<D: TokenDenoiser + ?Sized, R: Rng>(
    denoiser: &D,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    modality: Modality,
    length: usize,
    conds: Option<&[SemanticVector]>,
    settings: &SamplerSettings,
    rngs: &mut [R],
) -> Result<Vec<SampleRun>> {
    let b = rngs.len();
    let budgets = schedule.unmask_budget(length, settings.steps)?;
    let grid = NoiseSchedule::reverse_grid(settings.steps);
    let vocab = denoiser.vocab(modality) as u32;
    let mut states: Vec<CorruptionState> = (0..b).map(|_| CorruptionState::absorbed(length, modality, vocab)).collect();
    let mut trajectories: Vec<Vec<TrajectoryStep>> = vec![Vec::with_capacity(settings.steps); b];
    for (k, &n) in budgets.iter().enumerate() {
        let recs = reverse_step_batch(denoiser, store, &mut states, conds, &vec![n; b], grid[k + 1], settings, rngs)?;
        for (traj, mut rec) in trajectories.iter_mut().zip(recs) {
            rec.step = k;
            traj.push(rec);
        }
    }
    Ok(states
        .into_iter()
        .zip(trajectories)
        .map(|(st, trajectory)| {
            debug_assert!(!st.corrupted.tokens().contains(&MASK));
            SampleRun {
                sequence: st.corrupted,
                trajectory,
                evaluations: settings.steps,
            }
        })
        .collect())
}

#[allow(clippy::too_many_arguments)]
pub fn sample<D: TokenDenoiser + ?Sized, R: Rng>(
    denoiser: &D,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    modality: Modality,
    length: usize,
    cond: Option<&SemanticVector>,
    settings: &SamplerSettings,
    rng: &mut R,
) -> Result<SampleRun> {
    let conds = cond.map(|c| vec![c.clone()]);
    let rngs = std::slice::from_mut(rng);
    let mut runs = sample_batch(denoiser, store, schedule, modality, length, conds.as_deref(), settings, rngs)?;
    Ok(runs.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::{Tensor, Var};

    /// Logits depend only on position: token `(p * 3 + 1) % V` gets a large margin.
    struct OneHot {
        vocab: usize,
    }

    impl TokenDenoiser for OneHot {
        fn vocab(&self, _: Modality) -> usize {
            self.vocab
        }
        fn logits(&self, g: &mut Graph, _: &ParamStore, input: &DenoiseInput<'_>) -> crate::tensor::Result<Var> {
            let (b, l, v) = (input.batch(), input.len(), self.vocab);
            let mut data = vec![0.0; b * l * v];
            for r in 0..b * l {
                data[r * v + ((r % l) * 3 + 1) % v] = 1000.0;
            }
            Ok(g.constant(Tensor::new(vec![b * l, v], data)?))
        }
    }

    /// Uniform logits; every candidate has equal confidence.
    struct Flat;

    impl TokenDenoiser for Flat {
        fn vocab(&self, _: Modality) -> usize {
            5
        }
        fn logits(&self, g: &mut Graph, _: &ParamStore, input: &DenoiseInput<'_>) -> crate::tensor::Result<Var> {
            Ok(g.constant(Tensor::zeros(vec![input.batch() * input.len(), 5])))
        }
    }

    fn settings(steps: usize, policy: UnmaskPolicy) -> SamplerSettings {
        SamplerSettings { steps, policy, temperature: 1.0, injection: Injection::Absent }
    }

    #[test]
    fn one_hot_output_ignores_policy_and_seed() {
        let s = NoiseSchedule::default();
        let den = OneHot { vocab: 7 };
        let store = ParamStore::new();
        let expected: Vec<u32> = (0..12).map(|p| ((p * 3 + 1) % 7) as u32).collect();
        for policy in [UnmaskPolicy::Confidence, UnmaskPolicy::Random, UnmaskPolicy::LeftToRight] {
            for seed in 0..3 {
                for temperature in [0.0, 1.0, 5.0] {
                    let set = SamplerSettings { temperature, ..settings(4, policy) };
                    let run = sample(&den, &store, &s, Modality::Text, 12, None, &set, &mut rng::stream(seed, "s")).unwrap();
                    assert_eq!(run.sequence.tokens(), &expected[..]);
                    assert_eq!(run.evaluations, 4);
                }
            }
        }
    }

    #[test]
    fn left_to_right_commits_in_order() {
        let s = NoiseSchedule::default();
        let run = sample(&Flat, &ParamStore::new(), &s, Modality::Image, 6, None, &settings(6, UnmaskPolicy::LeftToRight), &mut rng::stream(0, "l")).unwrap();
        let order: Vec<usize> = run.trajectory.iter().flat_map(|r| r.positions.clone()).collect();
        assert_eq!(order, vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(run.evaluations, 6);
    }

    #[test]
    fn confidence_ties_break_to_lowest_position() {
        let s = NoiseSchedule::default();
        let run = sample(&Flat, &ParamStore::new(), &s, Modality::Text, 8, None, &settings(4, UnmaskPolicy::Confidence), &mut rng::stream(2, "c")).unwrap();
        let order: Vec<usize> = run.trajectory.iter().flat_map(|r| r.positions.clone()).collect();
        assert_eq!(order, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn step_errors() {
        let mut st = CorruptionState::absorbed(3, Modality::Text, 5);
        let mut r = rng::stream(0, "e");
        let set = settings(1, UnmaskPolicy::Random);
        let store = ParamStore::new();
        assert_eq!(
            reverse_step(&Flat, &store, &mut st, None, 4, 0.0, &set, &mut r),
            Err(DiffusionError::BudgetExceedsMasks { budget: 4, remaining: 3 })
        );
        assert_eq!(reverse_step(&Flat, &store, &mut st, None, 0, 0.0, &set, &mut r), Err(DiffusionError::EmptyBudget));
        let bad = SamplerSettings { temperature: -1.0, ..set };
        assert_eq!(reverse_step(&Flat, &store, &mut st, None, 1, 0.0, &bad, &mut r), Err(DiffusionError::Temperature(-1.0)));
        let rec = reverse_step(&Flat, &store, &mut st, None, 3, 0.0, &set, &mut r).unwrap();
        assert!(st.mask_set.is_empty());
        assert_eq!(rec.positions.len(), 3);
    }

    #[test]
    fn batching_matches_single_runs() {
        let s = NoiseSchedule::default();
        let set = settings(3, UnmaskPolicy::Random);
        let store = ParamStore::new();
        let mut rngs: Vec<_> = (0..3).map(|i| rng::substream(4, "b", i)).collect();
        let batch = sample_batch(&Flat, &store, &s, Modality::Text, 9, None, &set, &mut rngs).unwrap();
        for (i, run) in batch.iter().enumerate() {
            let single = sample(&Flat, &store, &s, Modality::Text, 9, None, &set, &mut rng::substream(4, "b", i as u64)).unwrap();
            assert_eq!(&single, run);
        }
    }
}
