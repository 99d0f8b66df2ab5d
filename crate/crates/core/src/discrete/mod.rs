//! Discrete absorbing diffusion over token sequences.
//!
//! The forward process replaces each non-padding token by the absorbing
//! [`MASK`] sentinel with marginal probability `gamma(t)`. The reverse process
//! starts fully masked and commits tokens in parallel, a fixed budget per step.

mod loss;
mod oracle;
mod sampler;

pub use loss::{discrete_loss, LossReduction, MaskedLoss};
pub use oracle::{chain_log_likelihood_oracle, OracleLimits};
pub use sampler::{
    reverse_step, reverse_step_batch, sample, sample_batch, SampleRun, SamplerSettings,
    TrajectoryStep, UnmaskPolicy,
};

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::modality::Modality;
use crate::schedules::{NoiseSchedule, ScheduleError};
use crate::tensor::TensorError;

/// Absorbing state of the forward process.
pub const MASK: u32 = u32::MAX - 1;
/// Right padding; never masked, never attended to.
pub const PAD: u32 = u32::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("token {id} at position {pos} is outside the {vocab}-token vocabulary")]
    InvalidToken { pos: usize, id: u32, vocab: u32 },
    #[error("padding must be a contiguous suffix (found content at {0} after padding)")]
    PadNotSuffix(usize),
    #[error("budget {budget} exceeds the {remaining} remaining masked positions")]
    BudgetExceedsMasks { budget: usize, remaining: usize },
    #[error("reverse step budget must be at least one")]
    EmptyBudget,
    #[error("corruption state does not match its sequence: {0}")]
    StateMismatch(String),
    #[error("temperature must be finite and non-negative, got {0}")]
    Temperature(f64),
    #[error("enumeration oracle infeasible: {0}")]
    OracleInfeasible(String),
    #[error("batch of {0} items has inconsistent modality or length")]
    RaggedBatch(usize),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DiffusionError> = std::result::Result<T, E>;

/// Fixed-length token sequence of one modality.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<u32>,
    modality: Modality,
    vocab: u32,
}

impl TokenSequence {
    pub fn new(tokens: Vec<u32>, modality: Modality, vocab: u32) -> Result<Self> {
        let mut seen_pad = false;
        for (pos, &id) in tokens.iter().enumerate() {
            if id == PAD {
                seen_pad = true;
                continue;
            }
            if seen_pad {
                return Err(DiffusionError::PadNotSuffix(pos));
            }
            if id != MASK && id >= vocab {
                return Err(DiffusionError::InvalidToken { pos, id, vocab });
            }
        }
        Ok(TokenSequence {
            tokens,
            modality,
            vocab,
        })
    }

    /// All-`MASK` sequence of the given length.
    pub fn masked(len: usize, modality: Modality, vocab: u32) -> Self {
        TokenSequence {
            tokens: vec![MASK; len],
            modality,
            vocab,
        }
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn vocab(&self) -> u32 {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of non-padding positions.
    pub fn content_len(&self) -> usize {
        self.tokens.iter().take_while(|&&t| t != PAD).count()
    }

    pub fn has_mask(&self) -> bool {
        self.tokens.contains(&MASK)
    }

    pub(crate) fn set(&mut self, pos: usize, id: u32) {
        self.tokens[pos] = id;
    }
}

/// A corrupted sequence `x_t`, its masked positions and the time that
/// produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionState {
    pub corrupted: TokenSequence,
    pub mask_set: BTreeSet<usize>,
    pub time: f64,
}

impl CorruptionState {
    /// Fully absorbed start of the reverse process.
    pub fn absorbed(len: usize, modality: Modality, vocab: u32) -> Self {
        CorruptionState {
            corrupted: TokenSequence::masked(len, modality, vocab),
            mask_set: (0..len).collect(),
            time: 1.0,
        }
    }

    /// Checks `p in mask_set <=> corrupted[p] == MASK`.
    pub fn validate(&self) -> Result<()> {
        for (p, &id) in self.corrupted.tokens().iter().enumerate() {
            if (id == MASK) != self.mask_set.contains(&p) {
                return Err(DiffusionError::StateMismatch(format!("position {p}")));
            }
        }
        if self.mask_set.iter().any(|&p| p >= self.corrupted.len()) {
            return Err(DiffusionError::StateMismatch("mask index past the end".into()));
        }
        Ok(())
    }

    pub fn masked_fraction(&self) -> f64 {
        let n = self.corrupted.content_len();
        if n == 0 {
            0.0
        } else {
            self.mask_set.len() as f64 / n as f64
        }
    }
}

/// Forward corruption: each non-padding position independently becomes
/// `MASK` with probability `gamma(t)`.
pub fn corrupt<R: Rng + ?Sized>(
    x0: &TokenSequence,
    t: f64,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<CorruptionState> {
    let gamma = schedule.gamma_at(t)?;
    corrupt_with_rate(x0, gamma, t, rng)
}

/// Corruption with an explicit masking probability; `time` is recorded as
/// given. Used by the fixed-rate ablation.
pub fn corrupt_with_rate<R: Rng + ?Sized>(
    x0: &TokenSequence,
    rate: f64,
    time: f64,
    rng: &mut R,
) -> Result<CorruptionState> {
    let mut corrupted = x0.clone();
    let mut mask_set = BTreeSet::new();
    for p in 0..x0.len() {
        if x0.tokens[p] == PAD {
            continue;
        }
        let u: f64 = rng.gen();
        if u < rate {
            corrupted.tokens[p] = MASK;
            mask_set.insert(p);
        }
    }
    Ok(CorruptionState {
        corrupted,
        mask_set,
        time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn seq(tokens: &[u32]) -> TokenSequence {
        TokenSequence::new(tokens.to_vec(), Modality::Text, 8).unwrap()
    }

    #[test]
    fn sequence_validation() {
        assert!(TokenSequence::new(vec![1, 2, PAD, PAD], Modality::Text, 8).is_ok());
        assert_eq!(
            TokenSequence::new(vec![1, PAD, 2], Modality::Text, 8),
            Err(DiffusionError::PadNotSuffix(2))
        );
        assert!(matches!(
            TokenSequence::new(vec![8], Modality::Text, 8),
            Err(DiffusionError::InvalidToken { pos: 0, id: 8, vocab: 8 })
        ));
    }

    #[test]
    fn corrupt_endpoints() {
        let s = NoiseSchedule::default();
        let x = seq(&[1, 2, 3, PAD]);
        let mut r = rng::stream(0, "t");
        let full = corrupt(&x, 1.0, &s, &mut r).unwrap();
        assert_eq!(full.mask_set, [0, 1, 2].into_iter().collect());
        assert_eq!(full.corrupted.tokens()[3], PAD);
        full.validate().unwrap();
        let none = corrupt(&x, 0.0, &s, &mut r).unwrap();
        assert!(none.mask_set.is_empty());
        assert_eq!(none.corrupted, x);
        let pads = seq(&[PAD, PAD]);
        assert!(corrupt(&pads, 1.0, &s, &mut r).unwrap().mask_set.is_empty());
    }

    #[test]
    fn corrupt_half_is_binomial() {
        let s = NoiseSchedule::default();
        let x = TokenSequence::new(vec![3; 1000], Modality::Image, 4).unwrap();
        let mut r = rng::stream(11, "binomial");
        let st = corrupt(&x, 0.5, &s, &mut r).unwrap();
        let n = st.mask_set.len();
        assert!((453..=547).contains(&n), "{n}");
        let again = corrupt(&x, 0.5, &s, &mut rng::stream(11, "binomial")).unwrap();
        assert_eq!(again, st);
    }
}
