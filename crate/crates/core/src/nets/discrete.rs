use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{linear, normal_init, sinusoidal_features, uniform_init, DenoiseInput, Injection, TimeEmbedding, TokenDenoiser};
use crate::bridge;
use crate::discrete::{MASK, PAD};
use crate::modality::Modality;
use crate::tensor::{Graph, ParamStore, Result, Tensor, TensorError, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscreteDenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ff_width: usize,
    pub text_vocab: usize,
    pub image_vocab: usize,
    pub max_len: usize,
    pub semantic_dim: usize,
    pub time_embedding: TimeEmbedding,
    /// Learned positional embeddings; switched off only by symmetry probes.
    pub positional: bool,
}

impl Default for DiscreteDenoiserConfig {
    fn default() -> Self {
        DiscreteDenoiserConfig {
            layers: 2,
            heads: 2,
            width: 64,
            ff_width: 128,
            text_vocab: 64,
            image_vocab: 32,
            max_len: 16,
            semantic_dim: 16,
            time_embedding: TimeEmbedding::Sinusoidal,
            positional: true,
        }
    }
}

impl DiscreteDenoiserConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.layers == 0 || self.ff_width == 0 || self.max_len == 0 || self.semantic_dim == 0 {
            return Err("layers, ff_width, max_len and semantic_dim must be positive".into());
        }
        if self.text_vocab == 0 || self.image_vocab == 0 {
            return Err("vocabularies must be non-empty".into());
        }
        Ok(())
    }
}

/// Bidirectional Transformer over `[Proj(r); Embed(x_t)]` with a shared trunk
/// and per-modality embedding tables and output heads.
#[derive(Debug, Clone)]
pub struct DiscreteDenoiser {
    pub config: DiscreteDenoiserConfig,
}

/// Logits plus per-layer attention probabilities `[B * H, S, S]`.
pub struct DenoiserOutput {
    pub logits: Var,
    pub attention: Vec<Var>,
    /// Sequence length seen by attention (`L + 1` with an injection slot).
    pub span: usize,
}

fn key(layer: usize, name: &str) -> String {
    format!("disc.layer{layer}.{name}")
}

impl DiscreteDenoiser {
    pub fn new(config: DiscreteDenoiserConfig) -> Self {
        DiscreteDenoiser { config }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let c = &self.config;
        let (e, f) = (c.width, c.ff_width);
        let lin = 1.0 / (e as f64).sqrt();
        let resid = lin / (2.0 * c.layers as f64).sqrt();
        for m in Modality::ALL {
            let v = self.vocab(m);
            store.insert(format!("disc.tok_emb.{m}"), uniform_init(rng, &[v + 2, e], 0.3))?;
            store.insert(format!("disc.head.{m}.w"), normal_init(rng, &[e, v], lin))?;
            store.insert(format!("disc.head.{m}.b"), Tensor::zeros(vec![v]))?;
        }
        store.insert("disc.pos_emb", uniform_init(rng, &[c.max_len + 1, e], 0.3))?;
        store.insert("disc.time.w", normal_init(rng, &[e, e], 0.2 * lin))?;
        store.insert("disc.time.b", Tensor::zeros(vec![e]))?;
        store.insert(bridge::PROJ_W, normal_init(rng, &[c.semantic_dim, e], 1.0 / (c.semantic_dim as f64).sqrt()))?;
        store.insert(bridge::PROJ_B, Tensor::zeros(vec![e]))?;
        for l in 0..c.layers {
            for ln in ["ln1", "ln2"] {
                store.insert(key(l, &format!("{ln}.g")), Tensor::new(vec![e], vec![1.0; e])?)?;
                store.insert(key(l, &format!("{ln}.b")), Tensor::zeros(vec![e]))?;
            }
            for proj in ["q", "k", "v"] {
                store.insert(key(l, &format!("{proj}.w")), normal_init(rng, &[e, e], lin))?;
                store.insert(key(l, &format!("{proj}.b")), Tensor::zeros(vec![e]))?;
            }
            store.insert(key(l, "o.w"), normal_init(rng, &[e, e], resid))?;
            store.insert(key(l, "o.b"), Tensor::zeros(vec![e]))?;
            store.insert(key(l, "ff1.w"), normal_init(rng, &[e, f], lin))?;
            store.insert(key(l, "ff1.b"), Tensor::zeros(vec![f]))?;
            store.insert(key(l, "ff2.w"), normal_init(rng, &[f, e], resid / (f as f64 / e as f64).sqrt()))?;
            store.insert(key(l, "ff2.b"), Tensor::zeros(vec![e]))?;
        }
        store.insert("disc.ln_f.g", Tensor::new(vec![e], vec![1.0; e])?)?;
        store.insert("disc.ln_f.b", Tensor::zeros(vec![e]))?;
        Ok(())
    }

    fn err(reason: String) -> TensorError {
        TensorError::InvalidArgument {
            op: "denoise_logits",
            node: 0,
            reason,
        }
    }

    /// Full forward pass, also exposing attention maps.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: &DenoiseInput<'_>) -> Result<DenoiserOutput> {
        let c = &self.config;
        let (b, l, e, h) = (input.batch(), input.len(), c.width, c.heads);
        if b == 0 || l == 0 {
            return Err(Self::err("empty batch".into()));
        }
        if l > c.max_len {
            return Err(Self::err(format!("sequence length {l} exceeds max_len {}", c.max_len)));
        }
        if input.tokens.iter().any(|t| t.len() != l) || input.times.len() != b {
            return Err(Self::err("ragged batch".into()));
        }
        let v = self.vocab(input.modality);
        let mut picks = Vec::with_capacity(b * l);
        for (bi, seq) in input.tokens.iter().enumerate() {
            for (p, &id) in seq.iter().enumerate() {
                let row = match id {
                    MASK => v,
                    PAD => v + 1,
                    id if (id as usize) < v => id as usize,
                    id => return Err(Self::err(format!("token {id} at ({bi}, {p}) outside vocabulary {v}"))),
                };
                picks.push((0, row));
            }
        }
        let table = g.param(store, &format!("disc.tok_emb.{}", input.modality))?;
        let mut x_tok = g.select_rows(&[table], &picks)?;
        let pos = if c.positional { Some(g.param(store, "disc.pos_emb")?) } else { None };
        if let Some(pos) = pos {
            let rows: Vec<(usize, usize)> = (0..b).flat_map(|_| (1..=l).map(|p| (0, p))).collect();
            let pe = g.select_rows(&[pos], &rows)?;
            x_tok = g.add(x_tok, pe)?;
        }

        let (mut hidden, span) = match input.injection {
            Injection::Absent => (x_tok, l),
            Injection::Active | Injection::Masked => {
                let cond = input.cond.ok_or_else(|| Self::err("injection requires a condition".into()))?;
                let mut slot = bridge::project(g, store, cond)?;
                if let Some(pos) = pos {
                    let pe = g.select_rows(&[pos], &vec![(0, 0); b])?;
                    slot = g.add(slot, pe)?;
                }
                (bridge::inject(g, slot, x_tok, b, l)?, l + 1)
            }
        };
        let offset = span - l;

        let feats = g.constant(sinusoidal_features(input.times, e));
        let temb = linear(g, store, feats, "disc.time.w", "disc.time.b")?;
        let spread: Vec<(usize, usize)> = (0..b).flat_map(|bi| std::iter::repeat((0, bi)).take(span)).collect();
        let temb = g.select_rows(&[temb], &spread)?;
        hidden = g.add(hidden, temb)?;

        let mut key_ok = Vec::with_capacity(b * span);
        for seq in &input.tokens {
            if offset == 1 {
                key_ok.push(input.injection == Injection::Active);
            }
            key_ok.extend(seq.iter().map(|&id| id != PAD));
        }
        let mut allowed = Vec::with_capacity(b * h * span * span);
        for bi in 0..b {
            let keys = &key_ok[bi * span..(bi + 1) * span];
            for _ in 0..h * span {
                allowed.extend_from_slice(keys);
            }
        }

        let dh = e / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attention = Vec::with_capacity(c.layers);
        for layer in 0..c.layers {
            let g1 = g.param(store, &key(layer, "ln1.g"))?;
            let b1 = g.param(store, &key(layer, "ln1.b"))?;
            let a = g.layer_norm(hidden, g1, b1, LN_EPS)?;
            let mut heads = Vec::with_capacity(3);
            for proj in ["q", "k", "v"] {
                let y = linear(g, store, a, &key(layer, &format!("{proj}.w")), &key(layer, &format!("{proj}.b")))?;
                let y = g.reshape(y, &[b, span, h, dh])?;
                let y = g.permute_0213(y)?;
                heads.push(g.reshape(y, &[b * h, span, dh])?);
            }
            let scores = g.batch_matmul(heads[0], heads[1], true)?;
            let scores = g.scale(scores, scale)?;
            let probs = g.masked_softmax(scores, Some(&allowed))?;
            attention.push(probs);
            let ctx = g.batch_matmul(probs, heads[2], false)?;
            let ctx = g.reshape(ctx, &[b, h, span, dh])?;
            let ctx = g.permute_0213(ctx)?;
            let ctx = g.reshape(ctx, &[b * span, e])?;
            let out = linear(g, store, ctx, &key(layer, "o.w"), &key(layer, "o.b"))?;
            hidden = g.add(hidden, out)?;

            let g2 = g.param(store, &key(layer, "ln2.g"))?;
            let b2 = g.param(store, &key(layer, "ln2.b"))?;
            let a = g.layer_norm(hidden, g2, b2, LN_EPS)?;
            let f = linear(g, store, a, &key(layer, "ff1.w"), &key(layer, "ff1.b"))?;
            let f = g.gelu(f)?;
            let f = linear(g, store, f, &key(layer, "ff2.w"), &key(layer, "ff2.b"))?;
            hidden = g.add(hidden, f)?;
        }
        let gf = g.param(store, "disc.ln_f.g")?;
        let bf = g.param(store, "disc.ln_f.b")?;
        let hidden = g.layer_norm(hidden, gf, bf, LN_EPS)?;
        let hidden = if offset == 0 {
            hidden
        } else {
            let rows: Vec<(usize, usize)> = (0..b).flat_map(|bi| (1..span).map(move |s| (0, bi * span + s))).collect();
            g.select_rows(&[hidden], &rows)?
        };
        let m = input.modality;
        let logits = linear(g, store, hidden, &format!("disc.head.{m}.w"), &format!("disc.head.{m}.b"))?;
        Ok(DenoiserOutput { logits, attention, span })
    }
}

impl TokenDenoiser for DiscreteDenoiser {
    fn vocab(&self, modality: Modality) -> usize {
        match modality {
            Modality::Text => self.config.text_vocab,
            Modality::Image => self.config.image_vocab,
        }
    }

    fn logits(&self, g: &mut Graph, store: &ParamStore, input: &DenoiseInput<'_>) -> Result<Var> {
        Ok(self.forward(g, store, input)?.logits)
    }
}
