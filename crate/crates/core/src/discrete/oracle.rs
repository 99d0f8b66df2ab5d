use std::collections::HashMap;

use super::{DiffusionError, Result, TokenSequence, MASK, PAD};
use crate::latent::SemanticVector;
use crate::nets::{DenoiseInput, Injection, TokenDenoiser};
use crate::schedules::NoiseSchedule;
use crate::tensor::{Graph, ParamStore};

/// Enumeration feasibility guard.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleLimits {
    pub max_len: usize,
    pub max_vocab: usize,
    pub max_steps: usize,
}

impl Default for OracleLimits {
    fn default() -> Self {
        OracleLimits {
            max_len: 4,
            max_vocab: 5,
            max_steps: 3,
        }
    }
}

fn ln_choose(n: usize, k: usize) -> f64 {
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Exact `log p(x | r)` under the `steps`-step reverse chain with the random
/// unmasking policy and temperature 1.
///
/// Step `k` picks a uniformly random size-`n_k` subset of the masked set and
/// samples each picked position from the denoiser at `t_k`, so a path that
/// commits `S_0, ..., S_{K-1}` has probability
/// `prod_k C(m_k, n_k)^-1 prod_{i in S_k} p_k(x_i)`. The sum over all ordered
/// partitions is evaluated by dynamic programming over mask sets.
#[allow(clippy::too_many_arguments)]
pub fn chain_log_likelihood_oracle<D: TokenDenoiser + ?Sized>(
    denoiser: &D,
    store: &ParamStore,
    schedule: &NoiseSchedule,
    x: &TokenSequence,
    cond: Option<&SemanticVector>,
    injection: Injection,
    steps: usize,
    limits: OracleLimits,
) -> Result<f64> {
    let len = x.len();
    let vocab = denoiser.vocab(x.modality());
    if len == 0 || len > limits.max_len || vocab > limits.max_vocab || steps == 0 || steps > limits.max_steps {
        return Err(DiffusionError::OracleInfeasible(format!(
            "L={len} (max {}), V={vocab} (max {}), K={steps} (max {})",
            limits.max_len, limits.max_vocab, limits.max_steps
        )));
    }
    if x.tokens().iter().any(|&t| t == MASK || t == PAD) {
        return Err(DiffusionError::OracleInfeasible("sequence must be fully observed without padding".into()));
    }
    let budgets = schedule.unmask_budget(len, steps)?;
    let grid = NoiseSchedule::reverse_grid(steps);
    let cond_tensor = match cond {
        Some(c) => Some(SemanticVector::stack(&[c]).map_err(|e| DiffusionError::StateMismatch(e.to_string()))?),
        None => None,
    };

    // Log-probabilities of the true tokens at each masked position, keyed by
    // (step, mask bitset).
    let mut cache: HashMap<(usize, u32), Vec<f64>> = HashMap::new();
    let mut true_logp = |k: usize, mask: u32| -> Result<Vec<f64>> {
        if let Some(v) = cache.get(&(k, mask)) {
            return Ok(v.clone());
        }
        let tokens: Vec<u32> = (0..len)
            .map(|p| if mask >> p & 1 == 1 { MASK } else { x.tokens()[p] })
            .collect();
        let mut g = Graph::new();
        let cond = cond_tensor.clone().map(|t| g.constant(t));
        let times = [grid[k]];
        let input = DenoiseInput {
            modality: x.modality(),
            tokens: vec![&tokens],
            times: &times,
            cond,
            injection,
        };
        let logits = denoiser.logits(&mut g, store, &input)?;
        let logp = g.log_softmax(logits)?;
        let lp = g.value(logp);
        let v: Vec<f64> = (0..len).map(|p| lp[p * vocab + x.tokens()[p] as usize]).collect();
        cache.insert((k, mask), v.clone());
        Ok(v)
    };

    // Forward DP: log-mass of reaching each mask set after k steps.
    let full: u32 = (1u32 << len) - 1;
    let mut frontier: HashMap<u32, f64> = HashMap::from([(full, 0.0)]);
    for (k, &n) in budgets.iter().enumerate() {
        let mut next: HashMap<u32, Vec<f64>> = HashMap::new();
        let mut keys: Vec<u32> = frontier.keys().copied().collect();
        keys.sort_unstable();
        for mask in keys {
            let base = frontier[&mask];
            let m = mask.count_ones() as usize;
            let lp = true_logp(k, mask)?;
            let norm = ln_choose(m, n);
            let mut sub = mask;
            // Enumerate every submask of `mask` with exactly n bits.
            loop {
                if sub.count_ones() as usize == n {
                    let gain: f64 = (0..len).filter(|p| sub >> p & 1 == 1).map(|p| lp[p]).sum();
                    next.entry(mask & !sub).or_default().push(base - norm + gain);
                }
                if sub == 0 {
                    break;
                }
                sub = (sub - 1) & mask;
            }
        }
        frontier = next.into_iter().map(|(k, v)| (k, log_sum_exp(&v))).collect();
    }
    Ok(frontier.get(&0).copied().unwrap_or(f64::NEG_INFINITY))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::Modality;
    use crate::tensor::{Tensor, Var};

    /// Logits depend on the masked pattern and time, so the chain is nontrivial.
    struct Tiny;

    impl TokenDenoiser for Tiny {
        fn vocab(&self, _: Modality) -> usize {
            3
        }
        fn logits(&self, g: &mut Graph, _: &ParamStore, input: &DenoiseInput<'_>) -> crate::tensor::Result<Var> {
            let l = input.len();
            let mut data = Vec::new();
            for (b, seq) in input.tokens.iter().enumerate() {
                let seen: f64 = seq.iter().filter(|&&t| t != MASK).map(|&t| t as f64 + 1.0).sum();
                for p in 0..l {
                    for v in 0..3 {
                        data.push(((p + 1) as f64 * 0.7 + v as f64 * seen * 0.3 + input.times[b]).sin());
                    }
                }
            }
            Ok(g.constant(Tensor::new(vec![input.batch() * l, 3], data)?))
        }
    }

    fn oracle(x: &[u32], k: usize) -> f64 {
        let seq = TokenSequence::new(x.to_vec(), Modality::Text, 3).unwrap();
        chain_log_likelihood_oracle(&Tiny, &ParamStore::new(), &NoiseSchedule::default(), &seq, None, Injection::Absent, k, OracleLimits::default()).unwrap()
    }

    #[test]
    fn one_step_one_token_is_log_softmax() {
        let mut g = Graph::new();
        let tokens = [MASK];
        let input = DenoiseInput {
            modality: Modality::Text,
            tokens: vec![&tokens],
            times: &[1.0],
            cond: None,
            injection: Injection::Absent,
        };
        let logits = Tiny.logits(&mut g, &ParamStore::new(), &input).unwrap();
        let row = g.value(logits).to_vec();
        let lse = log_sum_exp(&row);
        assert!((oracle(&[2], 1) - (row[2] - lse)).abs() < 1e-12);
    }

    #[test]
    fn distribution_normalizes() {
        for k in 1..=2 {
            let mut total = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    total += oracle(&[a, b], k).exp();
                }
            }
            assert!((total - 1.0).abs() < 1e-10, "K={k}: {total}");
        }
        let mut total = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    total += oracle(&[a, b, c], 3).exp();
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn guard_rejects_large_instances() {
        let seq = TokenSequence::new(vec![0; 5], Modality::Text, 3).unwrap();
        let r = chain_log_likelihood_oracle(&Tiny, &ParamStore::new(), &NoiseSchedule::default(), &seq, None, Injection::Absent, 2, OracleLimits::default());
        assert!(matches!(r, Err(DiffusionError::OracleInfeasible(_))));
    }
}
