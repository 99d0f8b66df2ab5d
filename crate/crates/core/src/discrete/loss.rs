use serde::{Deserialize, Serialize};

use super::{CorruptionState, DiffusionError, Result, TokenSequence};
use crate::nets::{DenoiseInput, Injection, TokenDenoiser};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// How masked-position log-likelihoods combine within one item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// `-(1/|M|) sum_{i in M} log p(x_i | ...)`.
    #[default]
    Mean,
    /// `-sum_{i in M} log p(x_i | ...)`.
    Sum,
}

/// Batch loss plus bookkeeping. `loss` is `None` when no item had a masked
/// position, in which case nothing should be backpropagated.
pub struct MaskedLoss {
    pub loss: Option<Var>,
    pub masked_positions: usize,
    pub contributing_items: usize,
}

/// Masked negative log-likelihood averaged over items with `|M| > 0`.
///
/// All items share modality and length. `cond` is the `[B, d]` condition
/// (ignored with `Injection::Absent`). Items with an empty mask set add
/// nothing to either the numerator or the denominator.
pub fn discrete_loss<D: TokenDenoiser + ?Sized>(
    denoiser: &D,
    g: &mut Graph,
    store: &ParamStore,
    items: &[(&TokenSequence, &CorruptionState)],
    cond: Option<Var>,
    injection: Injection,
    reduction: LossReduction,
) -> Result<MaskedLoss> {
    let first = items.first().ok_or(DiffusionError::RaggedBatch(0))?;
    let (modality, len) = (first.0.modality(), first.0.len());
    for (x0, st) in items {
        if x0.modality() != modality || x0.len() != len || st.corrupted.len() != len {
            return Err(DiffusionError::RaggedBatch(items.len()));
        }
        st.validate()?;
        for (p, (&a, &b)) in x0.tokens().iter().zip(st.corrupted.tokens()).enumerate() {
            if !st.mask_set.contains(&p) && a != b {
                return Err(DiffusionError::StateMismatch(format!("position {p} differs from x0 but is not masked")));
            }
        }
    }
    let contributing = items.iter().filter(|(_, st)| !st.mask_set.is_empty()).count();
    let masked: usize = items.iter().map(|(_, st)| st.mask_set.len()).sum();
    if contributing == 0 {
        return Ok(MaskedLoss {
            loss: None,
            masked_positions: 0,
            contributing_items: 0,
        });
    }
    let times: Vec<f64> = items.iter().map(|(_, st)| st.time).collect();
    let input = DenoiseInput {
        modality,
        tokens: items.iter().map(|(_, st)| st.corrupted.tokens()).collect(),
        times: &times,
        cond,
        injection,
    };
    let logits = denoiser.logits(g, store, &input)?;
    let logp = g.log_softmax(logits)?;
    let mut picks = Vec::with_capacity(masked);
    let mut weights = Vec::with_capacity(masked);
    for (b, (x0, st)) in items.iter().enumerate() {
        let w = match reduction {
            LossReduction::Mean => 1.0 / (st.mask_set.len() as f64 * contributing as f64),
            LossReduction::Sum => 1.0 / contributing as f64,
        };
        for &p in &st.mask_set {
            picks.push((b * len + p, x0.tokens()[p] as usize));
            weights.push(-w);
        }
    }
    let picked = g.pick(logp, &picks)?;
    let w = g.constant(Tensor::new(vec![masked], weights)?);
    let weighted = g.mul(picked, w)?;
    let loss = g.sum(weighted)?;
    Ok(MaskedLoss {
        loss: Some(loss),
        masked_positions: masked,
        contributing_items: contributing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discrete::MASK;
    use crate::modality::Modality;

    /// Returns fixed per-position log-probabilities, ignoring its input.
    struct Rigged {
        vocab: usize,
        logits: Vec<f64>,
    }

    impl TokenDenoiser for Rigged {
        fn vocab(&self, _: Modality) -> usize {
            self.vocab
        }
        fn logits(&self, g: &mut Graph, _: &ParamStore, input: &DenoiseInput<'_>) -> crate::tensor::Result<Var> {
            let rows = input.batch() * input.len();
            let data: Vec<f64> = (0..rows).flat_map(|r| self.logits[(r % input.len()) * self.vocab..][..self.vocab].to_vec()).collect();
            Ok(g.constant(Tensor::new(vec![rows, self.vocab], data)?))
        }
    }

    fn state(x0: &TokenSequence, masked: &[usize]) -> CorruptionState {
        let mut corrupted = x0.clone();
        for &p in masked {
            corrupted.set(p, MASK);
        }
        CorruptionState {
            corrupted,
            mask_set: masked.iter().copied().collect(),
            time: 0.5,
        }
    }

    fn eval(den: &Rigged, x0: &TokenSequence, masked: &[usize]) -> f64 {
        let st = state(x0, masked);
        let mut g = Graph::new();
        let store = ParamStore::new();
        let out = discrete_loss(den, &mut g, &store, &[(x0, &st)], None, Injection::Absent, LossReduction::Mean).unwrap();
        g.scalar(out.loss.unwrap())
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let den = Rigged { vocab: 4, logits: vec![0.0; 8] };
        let x0 = TokenSequence::new(vec![2, 1], Modality::Text, 4).unwrap();
        assert!((eval(&den, &x0, &[1]) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_drive_loss_to_zero() {
        let mut logits = vec![0.0; 8];
        logits[2] = 60.0;
        logits[4 + 1] = 60.0;
        let den = Rigged { vocab: 4, logits };
        let x0 = TokenSequence::new(vec![2, 1], Modality::Text, 4).unwrap();
        assert!(eval(&den, &x0, &[0, 1]) < 1e-20);
    }

    #[test]
    fn half_and_quarter_probabilities() {
        // Position 0: p(true = 0) = 1/2 over 4 tokens; position 1: p(true = 3) = 1/4.
        let l3 = 3f64.ln();
        let den = Rigged { vocab: 4, logits: vec![l3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0] };
        let x0 = TokenSequence::new(vec![0, 3], Modality::Text, 4).unwrap();
        let expected = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((eval(&den, &x0, &[0, 1]) - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_items_are_skipped() {
        let den = Rigged { vocab: 4, logits: vec![0.0; 8] };
        let x0 = TokenSequence::new(vec![2, 1], Modality::Text, 4).unwrap();
        let a = state(&x0, &[]);
        let b = state(&x0, &[0]);
        let store = ParamStore::new();
        let mut g = Graph::new();
        let out = discrete_loss(&den, &mut g, &store, &[(&x0, &a)], None, Injection::Absent, LossReduction::Mean).unwrap();
        assert!(out.loss.is_none());
        let out = discrete_loss(&den, &mut g, &store, &[(&x0, &a), (&x0, &b)], None, Injection::Absent, LossReduction::Mean).unwrap();
        assert_eq!(out.contributing_items, 1);
        assert!((g.scalar(out.loss.unwrap()) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sum_reduction_scales_with_mask_size() {
        let den = Rigged { vocab: 4, logits: vec![0.0; 8] };
        let x0 = TokenSequence::new(vec![2, 1], Modality::Text, 4).unwrap();
        let st = state(&x0, &[0, 1]);
        let mut g = Graph::new();
        let out = discrete_loss(&den, &mut g, &ParamStore::new(), &[(&x0, &st)], None, Injection::Absent, LossReduction::Sum).unwrap();
        assert!((g.scalar(out.loss.unwrap()) - 2.0 * 4f64.ln()).abs() < 1e-12);
    }
}
