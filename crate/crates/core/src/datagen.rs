//! Synthetic bimodal world with known latent factors, the corpus file format
//! and the mixed-modal batch sampler.
//!
//! Text is a run of `[C C C F]` clauses: the `C` slots spell the factor's
//! content template in order, each `F` slot is an i.i.d. filler token. Images
//! are a square grid whose checkerboard cells hold the factor's pattern and
//! whose other cells hold i.i.d. texture tokens. Filler and texture never
//! depend on the factor.

use std::io::{Read, Write};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::{adapt, AdapterDirection, BridgeError, Encoders};
use crate::discrete::{TokenSequence, MASK, PAD};
use crate::latent::SemanticVector;
use crate::modality::Modality;
use crate::rng;
use crate::tensor::ParamStore;

pub const CORPUS_MAGIC: &[u8; 8] = b"CMDCORP1";
const PAD16: u16 = 0xFFFF;
const MASK16: u16 = 0xFFFE;
const TEMPLATE_MIN_DISTANCE: usize = 6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid world settings: {0}")]
    Config(String),
    #[error("no {0} records to draw a batch from")]
    EmptyPartition(&'static str),
    #[error("corpus format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub num_factors: usize,
    pub text_vocab: usize,
    pub text_len: usize,
    pub image_vocab: usize,
    pub image_side: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            num_factors: 8,
            text_vocab: 64,
            text_len: 16,
            image_vocab: 32,
            image_side: 4,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn image_len(&self) -> usize {
        self.image_side * self.image_side
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.num_factors < 2 || self.num_factors > u16::MAX as usize {
            return bad("num_factors must be in 2..=65535");
        }
        if self.text_len == 0 || self.text_len % 4 != 0 {
            return bad("text_len must be a positive multiple of 4");
        }
        if self.text_vocab < 8 || self.text_vocab % 2 != 0 || self.image_vocab < 4 || self.image_vocab % 2 != 0 {
            return bad("vocabularies must be even (content half, filler half) and at least 8 (text) / 4 (image)");
        }
        if self.text_vocab >= MASK16 as usize || self.image_vocab >= MASK16 as usize {
            return bad("vocabularies must fit in 16 bits");
        }
        if self.image_side < 2 {
            return bad("image_side must be at least 2");
        }
        Ok(())
    }
}

/// A built world: content templates, image patterns and the filler grammar.
#[derive(Debug, Clone)]
pub struct ToyWorld {
    pub config: WorldConfig,
    text_templates: Vec<Vec<u32>>,
    image_patterns: Vec<Vec<u32>>,
}

fn draw_templates<R: Rng>(rng: &mut R, factors: usize, slots: usize, pool: u32) -> Vec<Vec<u32>> {
    let min_distance = TEMPLATE_MIN_DISTANCE.min(slots);
    let mut out: Vec<Vec<u32>> = Vec::with_capacity(factors);
    let mut attempts = 0usize;
    while out.len() < factors {
        let cand: Vec<u32> = (0..slots).map(|_| rng.gen_range(0..pool)).collect();
        let mut sorted = cand.clone();
        sorted.sort_unstable();
        attempts += 1;
        // Relax the separation requirement if the pool is too small to meet it.
        let need = if attempts > 10_000 { 1 } else { min_distance };
        let ok = out.iter().all(|t| {
            let mut ts = t.clone();
            ts.sort_unstable();
            ts != sorted && t.iter().zip(&cand).filter(|(a, b)| a != b).count() >= need
        });
        if ok {
            out.push(cand);
        }
    }
    out
}

impl ToyWorld {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, "world.grammar");
        let text_slots = config.text_len / 4 * 3;
        let image_slots = config.image_len().div_ceil(2);
        let text_templates = draw_templates(&mut r, config.num_factors, text_slots, (config.text_vocab / 2) as u32);
        let image_patterns = draw_templates(&mut r, config.num_factors, image_slots, (config.image_vocab / 2) as u32);
        Ok(ToyWorld {
            config,
            text_templates,
            image_patterns,
        })
    }

    pub fn num_factors(&self) -> usize {
        self.config.num_factors
    }

    pub fn vocab(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.config.text_vocab,
            Modality::Image => self.config.image_vocab,
        }
    }

    pub fn len(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.config.text_len,
            Modality::Image => self.config.image_len(),
        }
    }

    /// Whether position `p` carries factor information.
    pub fn is_content(&self, m: Modality, p: usize) -> bool {
        match m {
            Modality::Text => p % 4 < 3,
            Modality::Image => {
                let s = self.config.image_side;
                (p / s + p % s) % 2 == 0
            }
        }
    }

    pub fn content_positions(&self, m: Modality) -> Vec<usize> {
        (0..self.len(m)).filter(|&p| self.is_content(m, p)).collect()
    }

    fn template(&self, m: Modality, factor: usize) -> &[u32] {
        match m {
            Modality::Text => &self.text_templates[factor],
            Modality::Image => &self.image_patterns[factor],
        }
    }

    pub fn render<R: Rng + ?Sized>(&self, m: Modality, factor: usize, rng: &mut R) -> TokenSequence {
        let template = self.template(m, factor);
        let len = self.len(m);
        let mut tokens = vec![0u32; len];
        let mut slot = 0;
        let filler = (self.vocab(m) / 2) as u32;
        for (p, tok) in tokens.iter_mut().enumerate() {
            if self.is_content(m, p) {
                *tok = template[slot];
                slot += 1;
            } else {
                *tok = filler + rng.gen_range(0..filler);
            }
        }
        TokenSequence::new(tokens, m, self.vocab(m) as u32).expect("rendered tokens are in range")
    }

    /// Template inverse: the unique factor whose content template matches at
    /// least `min_matches` content slots with the most matches, if any.
    pub fn recover_factor(&self, x: &TokenSequence, min_matches: usize) -> Option<usize> {
        let m = x.modality();
        if x.len() != self.len(m) {
            return None;
        }
        let content: Vec<u32> = self.content_positions(m).into_iter().map(|p| x.tokens()[p]).collect();
        let scores: Vec<usize> = (0..self.num_factors())
            .map(|f| self.template(m, f).iter().zip(&content).filter(|(a, b)| a == b).count())
            .collect();
        let best = *scores.iter().max()?;
        if best < min_matches || scores.iter().filter(|&&s| s == best).count() > 1 {
            return None;
        }
        scores.iter().position(|&s| s == best)
    }

    /// Default recovery threshold: three quarters of the content slots.
    pub fn default_min_matches(&self, m: Modality) -> usize {
        (self.content_positions(m).len() * 3).div_ceil(4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub modality: Modality,
    pub split: Split,
    /// Hidden ground truth; for evaluation only.
    pub factor: u16,
    /// Shared by the two halves of a pair; `u32::MAX` when unpaired.
    pub pair_id: u32,
    pub tokens: TokenSequence,
}

pub const UNPAIRED: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusCounts {
    pub text_only: usize,
    pub image_only: usize,
    pub paired: usize,
    pub heldout_pairs: usize,
}

impl Default for CorpusCounts {
    fn default() -> Self {
        CorpusCounts {
            text_only: 2000,
            image_only: 2000,
            paired: 1000,
            heldout_pairs: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub world: ToyWorld,
    pub records: Vec<Record>,
}

/// Generates the corpus; every record uses its own substream, so the corpus
/// is a pure function of the world config and `seed`.
pub fn gen_corpus(world: &ToyWorld, counts: CorpusCounts, seed: u64) -> Result<Corpus> {
    if counts.text_only == 0 || counts.image_only == 0 || counts.paired == 0 || counts.heldout_pairs == 0 {
        return Err(DataError::Config("all corpus counts must be positive".into()));
    }
    let mut records = Vec::new();
    let mut index = 0u64;
    let mut next = |label: &str| {
        index += 1;
        rng::substream(seed, label, index)
    };
    let draw = |r: &mut rng::Rng, m: Modality, split: Split, pair_id: u32, factor: Option<usize>| {
        let f = factor.unwrap_or_else(|| r.gen_range(0..world.num_factors()));
        Record {
            modality: m,
            split,
            factor: f as u16,
            pair_id,
            tokens: world.render(m, f, r),
        }
    };
    for _ in 0..counts.text_only {
        records.push(draw(&mut next("corpus.text"), Modality::Text, Split::Train, UNPAIRED, None));
    }
    for _ in 0..counts.image_only {
        records.push(draw(&mut next("corpus.image"), Modality::Image, Split::Train, UNPAIRED, None));
    }
    let total_pairs = counts.paired + counts.heldout_pairs;
    for pair in 0..total_pairs {
        let split = if pair < counts.paired { Split::Train } else { Split::Heldout };
        let mut r = next("corpus.pair");
        let f = r.gen_range(0..world.num_factors());
        records.push(draw(&mut r, Modality::Text, split, pair as u32, Some(f)));
        records.push(draw(&mut r, Modality::Image, split, pair as u32, Some(f)));
    }
    Ok(Corpus {
        world: world.clone(),
        records,
    })
}

impl Corpus {
    fn width(&self) -> usize {
        self.world.config.text_len.max(self.world.config.image_len())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let c = &self.world.config;
        w.write_all(CORPUS_MAGIC)?;
        w.write_all(&c.seed.to_le_bytes())?;
        for v in [c.num_factors, c.text_vocab, c.text_len, c.image_vocab, c.image_side] {
            w.write_all(&(v as u16).to_le_bytes())?;
        }
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        let width = self.width();
        for rec in &self.records {
            w.write_all(&[rec.modality.id() as u8, rec.split as u8])?;
            w.write_all(&rec.factor.to_le_bytes())?;
            w.write_all(&rec.pair_id.to_le_bytes())?;
            for p in 0..width {
                let t = match rec.tokens.tokens().get(p).copied().unwrap_or(PAD) {
                    PAD => PAD16,
                    MASK => MASK16,
                    t => t as u16,
                };
                w.write_all(&t.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(DataError::Format("truncated corpus".into()));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(8)? != CORPUS_MAGIC {
            return Err(DataError::Format("bad magic".into()));
        }
        let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        }
        let config = WorldConfig {
            num_factors: dims[0],
            text_vocab: dims[1],
            text_len: dims[2],
            image_vocab: dims[3],
            image_side: dims[4],
            seed,
        };
        let world = ToyWorld::new(config)?;
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let width = world.config.text_len.max(world.config.image_len());
        let mut records = Vec::with_capacity(n);
        for i in 0..n {
            let head = take(8)?;
            let modality = Modality::from_id(head[0]).ok_or_else(|| DataError::Format(format!("record {i}: bad modality")))?;
            let split = match head[1] {
                0 => Split::Train,
                1 => Split::Heldout,
                s => return Err(DataError::Format(format!("record {i}: bad split {s}"))),
            };
            let factor = u16::from_le_bytes([head[2], head[3]]);
            let pair_id = u32::from_le_bytes(head[4..8].try_into().unwrap());
            let raw = take(2 * width)?;
            let len = world.len(modality);
            let tokens: Vec<u32> = raw
                .chunks_exact(2)
                .take(len)
                .map(|c| match u16::from_le_bytes([c[0], c[1]]) {
                    PAD16 => PAD,
                    MASK16 => MASK,
                    t => u32::from(t),
                })
                .collect();
            let tokens = TokenSequence::new(tokens, modality, world.vocab(modality) as u32)
                .map_err(|e| DataError::Format(format!("record {i}: {e}")))?;
            records.push(Record {
                modality,
                split,
                factor,
                pair_id,
                tokens,
            });
        }
        if !cur.is_empty() {
            return Err(DataError::Format("trailing bytes".into()));
        }
        Ok(Corpus { world, records })
    }

    /// Indices of unpaired records of one modality in a split.
    pub fn unpaired(&self, m: Modality, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| {
                let r = &self.records[i];
                r.modality == m && r.split == split && r.pair_id == UNPAIRED
            })
            .collect()
    }

    /// `(text index, image index)` per pair in a split.
    pub fn pairs(&self, split: Split) -> Vec<(usize, usize)> {
        let mut text = std::collections::BTreeMap::new();
        let mut image = std::collections::BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.pair_id == UNPAIRED || r.split != split {
                continue;
            }
            match r.modality {
                Modality::Text => text.insert(r.pair_id, i),
                Modality::Image => image.insert(r.pair_id, i),
            };
        }
        text.into_iter().filter_map(|(id, t)| image.get(&id).map(|&im| (t, im))).collect()
    }

    /// Every training record of a modality, paired or not.
    pub fn all_of(&self, m: Modality, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].modality == m && self.records[i].split == split)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchKind {
    TextOnly,
    ImageOnly,
    Paired,
}

impl BatchKind {
    pub const ALL: [BatchKind; 3] = [BatchKind::TextOnly, BatchKind::ImageOnly, BatchKind::Paired];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchItem {
    /// Record to reconstruct.
    pub target: usize,
    /// Record whose encoding conditions the target: itself, or the
    /// other-modality twin when swapped.
    pub source: usize,
    pub swap_applied: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub kind: BatchKind,
    pub items: Vec<BatchItem>,
}

/// Draws one batch; the kind is drawn with weights `mix` (text, image,
/// paired) and applies to the whole batch. Paired items pick their target
/// modality with a fair coin.
pub fn make_batch<R: Rng + ?Sized>(corpus: &Corpus, mix: [f64; 3], batch_size: usize, rng: &mut R) -> Result<Batch> {
    let dist = WeightedIndex::new(mix).map_err(|e| DataError::Config(format!("mix ratio: {e}")))?;
    let kind = BatchKind::ALL[dist.sample(rng)];
    let items = match kind {
        BatchKind::TextOnly | BatchKind::ImageOnly => {
            let m = if kind == BatchKind::TextOnly { Modality::Text } else { Modality::Image };
            let pool = corpus.unpaired(m, Split::Train);
            if pool.is_empty() {
                return Err(DataError::EmptyPartition(m.name()));
            }
            (0..batch_size)
                .map(|_| {
                    let i = pool[rng.gen_range(0..pool.len())];
                    BatchItem { target: i, source: i, swap_applied: false }
                })
                .collect()
        }
        BatchKind::Paired => {
            let pool = corpus.pairs(Split::Train);
            if pool.is_empty() {
                return Err(DataError::EmptyPartition("paired"));
            }
            (0..batch_size)
                .map(|_| {
                    let (t, im) = pool[rng.gen_range(0..pool.len())];
                    let (target, source) = if rng.gen_bool(0.5) { (t, im) } else { (im, t) };
                    BatchItem { target, source, swap_applied: true }
                })
                .collect()
        }
    };
    Ok(Batch { kind, items })
}

impl Batch {
    /// Conditions under the current adapters: `encode(x)` for intra-modal
    /// items, `adapt(encode(twin))` for swapped ones.
    pub fn conditions(&self, corpus: &Corpus, encoders: &Encoders, store: &ParamStore) -> Result<Vec<SemanticVector>> {
        self.items
            .iter()
            .map(|it| {
                let r = encoders.encode(&corpus.records[it.source].tokens)?;
                if it.swap_applied {
                    Ok(adapt(store, &r, AdapterDirection::from_source(r.modality()))?)
                } else {
                    Ok(r)
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ToyWorld, Corpus) {
        let world = ToyWorld::new(WorldConfig { seed: 3, ..Default::default() }).unwrap();
        let counts = CorpusCounts { text_only: 300, image_only: 300, paired: 100, heldout_pairs: 20 };
        let corpus = gen_corpus(&world, counts, 5).unwrap();
        (world, corpus)
    }

    #[test]
    fn templates_are_distinct_and_separated() {
        let (world, _) = small();
        for m in Modality::ALL {
            for a in 0..8 {
                for b in a + 1..8 {
                    let (ta, tb) = (world.template(m, a), world.template(m, b));
                    let diff = ta.iter().zip(tb).filter(|(x, y)| x != y).count();
                    assert!(diff >= TEMPLATE_MIN_DISTANCE, "{m} {a} {b}");
                }
            }
        }
    }

    #[test]
    fn every_record_round_trips_to_its_factor() {
        let (world, corpus) = small();
        for r in &corpus.records {
            let n = world.content_positions(r.modality).len();
            assert_eq!(world.recover_factor(&r.tokens, n), Some(r.factor as usize));
        }
    }

    #[test]
    fn corpus_bytes_round_trip_and_are_deterministic() {
        let (world, corpus) = small();
        let bytes = corpus.to_bytes();
        let again = gen_corpus(&world, CorpusCounts { text_only: 300, image_only: 300, paired: 100, heldout_pairs: 20 }, 5).unwrap();
        assert_eq!(bytes, again.to_bytes());
        let back = Corpus::from_bytes(&bytes).unwrap();
        assert_eq!(back.records, corpus.records);
        assert!(Corpus::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Corpus::from_bytes(&bad).is_err());
    }

    #[test]
    fn pairs_share_factors() {
        let (_, corpus) = small();
        let pairs = corpus.pairs(Split::Train);
        assert_eq!(pairs.len(), 100);
        assert_eq!(corpus.pairs(Split::Heldout).len(), 20);
        for (t, i) in pairs {
            assert_eq!(corpus.records[t].factor, corpus.records[i].factor);
            assert_eq!(corpus.records[t].modality, Modality::Text);
            assert_eq!(corpus.records[i].modality, Modality::Image);
        }
    }

    #[test]
    fn batch_rules() {
        let (_, corpus) = small();
        let mut r = rng::stream(1, "b");
        let mut seen = [false; 3];
        for _ in 0..50 {
            let b = make_batch(&corpus, [2.0, 2.0, 1.0], 8, &mut r).unwrap();
            seen[b.kind as usize] = true;
            for it in &b.items {
                let (t, s) = (&corpus.records[it.target], &corpus.records[it.source]);
                match b.kind {
                    BatchKind::Paired => {
                        assert!(it.swap_applied);
                        assert_eq!(t.pair_id, s.pair_id);
                        assert_ne!(t.modality, s.modality);
                    }
                    _ => {
                        assert!(!it.swap_applied);
                        assert_eq!(it.target, it.source);
                    }
                }
            }
        }
        assert_eq!(seen, [true; 3]);
    }
}
