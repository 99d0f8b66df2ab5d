//! Semantic bridge between the two diffusion processes: frozen encoders
//! `r = E(x)`, the injection slot `[Proj(r); Embed(x_t)]`, and the modality
//! adapters used for representation swapping.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discrete::{TokenSequence, MASK, PAD};
use crate::latent::SemanticVector;
use crate::modality::Modality;
use crate::rng;
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

pub const PROJ_W: &str = "disc.inject.w";
pub const PROJ_B: &str = "disc.inject.b";

/// Width of the image encoder's positional-average feature.
const IMAGE_FEATURES: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BridgeError {
    #[error("cannot encode a sequence with no content tokens")]
    AllPadding,
    #[error("cannot encode a sequence containing MASK at position {0}")]
    MaskInInput(usize),
    #[error("token {0} outside the encoder vocabulary")]
    TokenRange(u32),
    #[error("expected a {expected} representation, got {found}")]
    ModalityMismatch { expected: Modality, found: Modality },
    #[error("representation collapsed to zero norm")]
    ZeroNorm,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A never-trained random projection of handcrafted sequence features.
///
/// Text: counts of bigrams over `BOS x EOS` (so one-token inputs still have
/// features), projected to `dim`. Image: mean over positions of
/// `token_embedding[x_p] * position_embedding[p]`, projected to `dim`.
#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    modality: Modality,
    vocab: usize,
    dim: usize,
    seed: u64,
    /// `[features, dim]`, row-major.
    projection: Vec<f64>,
    token_table: Vec<f64>,
    position_table: Vec<f64>,
}

impl FrozenEncoder {
    pub fn new(modality: Modality, vocab: usize, max_len: usize, dim: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &format!("encoder.{modality}"));
        let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut r)).collect() };
        let (features, token_table, position_table) = match modality {
            Modality::Text => ((vocab + 1) * (vocab + 1), Vec::new(), Vec::new()),
            Modality::Image => {
                let tok = gauss(vocab * IMAGE_FEATURES);
                let pos = gauss(max_len * IMAGE_FEATURES);
                (IMAGE_FEATURES, tok, pos)
            }
        };
        let projection = gauss(features * dim);
        FrozenEncoder {
            modality,
            vocab,
            dim,
            seed,
            projection,
            token_table,
            position_table,
        }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Raw bytes of every fixed table, for reproducibility checks.
    pub fn projection_bytes(&self) -> Vec<u8> {
        self.projection
            .iter()
            .chain(&self.token_table)
            .chain(&self.position_table)
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }

    pub fn encode(&self, x: &TokenSequence) -> Result<SemanticVector, BridgeError> {
        if x.modality() != self.modality {
            return Err(BridgeError::ModalityMismatch {
                expected: self.modality,
                found: x.modality(),
            });
        }
        let content: Vec<u32> = x.tokens().iter().copied().take_while(|&t| t != PAD).collect();
        if content.is_empty() {
            return Err(BridgeError::AllPadding);
        }
        if let Some(p) = content.iter().position(|&t| t == MASK) {
            return Err(BridgeError::MaskInInput(p));
        }
        if let Some(&t) = content.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(BridgeError::TokenRange(t));
        }
        let d = self.dim;
        let mut out = vec![0.0; d];
        match self.modality {
            Modality::Text => {
                let boundary = self.vocab;
                let mut prev = boundary;
                let ids = content.iter().map(|&t| t as usize).chain(std::iter::once(boundary));
                for cur in ids {
                    let row = &self.projection[(prev * (self.vocab + 1) + cur) * d..][..d];
                    out.iter_mut().zip(row).for_each(|(o, w)| *o += w);
                    prev = cur;
                }
            }
            Modality::Image => {
                let mut feat = [0.0; IMAGE_FEATURES];
                for (p, &t) in content.iter().enumerate() {
                    let tok = &self.token_table[t as usize * IMAGE_FEATURES..][..IMAGE_FEATURES];
                    let pos = &self.position_table[p * IMAGE_FEATURES..][..IMAGE_FEATURES];
                    for j in 0..IMAGE_FEATURES {
                        feat[j] += tok[j] * pos[j];
                    }
                }
                let n = content.len() as f64;
                for (j, f) in feat.iter().enumerate() {
                    let row = &self.projection[j * d..][..d];
                    out.iter_mut().zip(row).for_each(|(o, w)| *o += w * f / n);
                }
            }
        }
        SemanticVector::normalized(out, self.modality).ok_or(BridgeError::ZeroNorm)
    }
}

/// The pair of frozen encoders for a world.
#[derive(Debug, Clone)]
pub struct Encoders {
    pub text: FrozenEncoder,
    pub image: FrozenEncoder,
}

impl Encoders {
    pub fn new(text_vocab: usize, image_vocab: usize, max_len: usize, dim: usize, seed: u64) -> Self {
        Encoders {
            text: FrozenEncoder::new(Modality::Text, text_vocab, max_len, dim, seed),
            image: FrozenEncoder::new(Modality::Image, image_vocab, max_len, dim, seed),
        }
    }

    pub fn get(&self, m: Modality) -> &FrozenEncoder {
        match m {
            Modality::Text => &self.text,
            Modality::Image => &self.image,
        }
    }

    pub fn encode(&self, x: &TokenSequence) -> Result<SemanticVector, BridgeError> {
        self.get(x.modality()).encode(x)
    }
}

/// `Proj(r)`: affine map from the semantic space to the token-embedding width.
pub fn project(g: &mut Graph, store: &ParamStore, cond: Var) -> Result<Var, TensorError> {
    let w = g.param(store, PROJ_W)?;
    let b = g.param(store, PROJ_B)?;
    let y = g.matmul(cond, w)?;
    g.add_bias(y, b)
}

/// Prepends one context row per sequence: `slot` is `[B, E]`, `embedded` is
/// `[B * L, E]`; the result is `[B * (L + 1), E]` with row `b * (L + 1)`
/// holding `slot[b]` and the following `L` rows copied unchanged.
pub fn inject(g: &mut Graph, slot: Var, embedded: Var, batch: usize, len: usize) -> Result<Var, TensorError> {
    let mut picks = Vec::with_capacity(batch * (len + 1));
    for b in 0..batch {
        picks.push((0, b));
        picks.extend((0..len).map(|p| (1, b * len + p)));
    }
    g.select_rows(&[slot, embedded], &picks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterDirection {
    TextToImage,
    ImageToText,
}

impl AdapterDirection {
    pub fn from_source(source: Modality) -> Self {
        match source {
            Modality::Text => AdapterDirection::TextToImage,
            Modality::Image => AdapterDirection::ImageToText,
        }
    }

    pub fn source(self) -> Modality {
        match self {
            AdapterDirection::TextToImage => Modality::Text,
            AdapterDirection::ImageToText => Modality::Image,
        }
    }

    pub fn target(self) -> Modality {
        self.source().other()
    }

    fn prefix(self) -> &'static str {
        match self {
            AdapterDirection::TextToImage => "adapt.text_to_image",
            AdapterDirection::ImageToText => "adapt.image_to_text",
        }
    }

    pub fn weight_name(self) -> String {
        format!("{}.w", self.prefix())
    }

    pub fn bias_name(self) -> String {
        format!("{}.b", self.prefix())
    }
}

/// Identity-initialized `d x d` adapters with zero bias, plus small noise
/// when `jitter > 0`.
pub fn init_adapters<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, jitter: f64, rng: &mut R) -> Result<(), TensorError> {
    for dir in [AdapterDirection::TextToImage, AdapterDirection::ImageToText] {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        if jitter > 0.0 {
            w.iter_mut().for_each(|v| *v += rng.gen_range(-jitter..jitter));
        }
        store.insert(dir.weight_name(), Tensor::new(vec![dim, dim], w)?)?;
        store.insert(dir.bias_name(), Tensor::zeros(vec![dim]))?;
    }
    Ok(())
}

/// `normalize(r W + b)` on a `[B, d]` batch of source-modality vectors.
pub fn adapt_var(g: &mut Graph, store: &ParamStore, r: Var, direction: AdapterDirection) -> Result<Var, TensorError> {
    let w = g.param(store, &direction.weight_name())?;
    let b = g.param(store, &direction.bias_name())?;
    let y = g.matmul(r, w)?;
    let y = g.add_bias(y, b)?;
    g.l2_normalize_rows(y)
}

/// Maps `r` toward the other modality's region; the result is unit norm and
/// tagged with the target modality.
pub fn adapt(store: &ParamStore, r: &SemanticVector, direction: AdapterDirection) -> Result<SemanticVector, BridgeError> {
    if r.modality() != direction.source() {
        return Err(BridgeError::ModalityMismatch {
            expected: direction.source(),
            found: r.modality(),
        });
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, r.dim()], r.values().to_vec())?);
    let y = adapt_var(&mut g, store, x, direction).map_err(|e| match e {
        TensorError::InvalidArgument { op: "l2_normalize_rows", .. } => BridgeError::ZeroNorm,
        e => BridgeError::Tensor(e),
    })?;
    SemanticVector::normalized(g.value(y).to_vec(), direction.target()).ok_or(BridgeError::ZeroNorm)
}
