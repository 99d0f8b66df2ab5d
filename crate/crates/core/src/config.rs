//! Experiment configuration: one TOML document with dotted sections, a global
//! seed fanned out into a resolved seed table, and `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datagen::{CorpusCounts, WorldConfig};
use crate::discrete::UnmaskPolicy;
use crate::nets::{DiscreteDenoiserConfig, LatentDenoiserConfig};
use crate::rng::derive_seed;
use crate::schedules::NoiseSchedule;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override `{0}`: expected key.path=value")]
    Override(String),
    #[error("invalid config:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

const SEED_MASK: u64 = i64::MAX as u64;

/// Per-consumer seeds. Missing entries are derived from the global seed as
/// `derive_seed(seed, "<field name>")` truncated to 63 bits (TOML integers
/// are signed).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedTable {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub world: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoders: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_latent: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_discrete: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage1: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage2: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<u64>,
}

/// Seeds after resolution; every consumer has one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub world: u64,
    pub corpus: u64,
    pub encoders: u64,
    pub init_latent: u64,
    pub init_discrete: u64,
    pub stage1: u64,
    pub stage2: u64,
    pub sample: u64,
    pub eval: u64,
}

impl SeedTable {
    fn resolve(&mut self, global: u64) {
        let fill = |slot: &mut Option<u64>, label: &str| {
            slot.get_or_insert_with(|| derive_seed(global, label) & SEED_MASK);
        };
        fill(&mut self.world, "world");
        fill(&mut self.corpus, "corpus");
        fill(&mut self.encoders, "encoders");
        fill(&mut self.init_latent, "init_latent");
        fill(&mut self.init_discrete, "init_discrete");
        fill(&mut self.stage1, "stage1");
        fill(&mut self.stage2, "stage2");
        fill(&mut self.sample, "sample");
        fill(&mut self.eval, "eval");
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSettings {
    pub dim: usize,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        EncoderSettings { dim: 16 }
    }
}

/// Where the conditioning vectors for evaluation come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSource {
    /// Frozen-encoder representations of held-out items.
    Heldout,
    /// Draws from the Stage I prior.
    Prior,
}

impl std::str::FromStr for ConditionSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "heldout" => Ok(ConditionSource::Heldout),
            "prior" => Ok(ConditionSource::Prior),
            _ => Err(format!("unknown condition source `{s}` (heldout, prior)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub steps: usize,
    pub policy: UnmaskPolicy,
    pub temperature: f64,
    /// Samples drawn per held-out conditioning item.
    pub samples_per_condition: usize,
    pub bleu_orders: Vec<usize>,
    pub bootstrap: usize,
    pub cross_modal_threshold: f64,
    pub condition: ConditionSource,
    /// Held-out texts scored by the ELBO metric, and draws per text.
    pub elbo_items: usize,
    pub elbo_draws: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            steps: 8,
            policy: UnmaskPolicy::Confidence,
            temperature: 1.0,
            samples_per_condition: 1,
            bleu_orders: vec![2, 4],
            bootstrap: 500,
            cross_modal_threshold: 0.7,
            condition: ConditionSource::Heldout,
            elbo_items: 20,
            elbo_draws: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSettings {
    pub fixed_mask_rate: f64,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings { fixed_mask_rate: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Parent of the run directories. Not part of the run identity.
    pub output_dir: PathBuf,
    pub seeds: SeedTable,
    pub world: WorldConfig,
    pub corpus: CorpusCounts,
    pub schedule: NoiseSchedule,
    pub encoder: EncoderSettings,
    pub latent_net: LatentDenoiserConfig,
    pub discrete_net: DiscreteDenoiserConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub eval: EvalSettings,
    pub ablation: AblationSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            seeds: SeedTable::default(),
            world: WorldConfig::default(),
            corpus: CorpusCounts::default(),
            schedule: NoiseSchedule::default(),
            encoder: EncoderSettings::default(),
            latent_net: LatentDenoiserConfig::default(),
            discrete_net: DiscreteDenoiserConfig::default(),
            stage1: TrainConfig::latent_default(),
            stage2: TrainConfig::default(),
            eval: EvalSettings::default(),
            ablation: AblationSettings::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to a TOML table. Values parse as TOML literals and
/// fall back to bare strings.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(spec.to_string()));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Parses config text, applies overrides, fills the seed table and
    /// validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.resolved()
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.to_path_buf(), source })?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    /// Fills the seed table, pushes seeds into the sub-configs and validates.
    pub fn resolved(mut self) -> Result<Self> {
        self.seeds.resolve(self.seed);
        let s = self.seeds();
        self.world.seed = s.world;
        self.stage1.seed = s.stage1;
        self.stage2.seed = s.stage2;
        self.validate()?;
        Ok(self)
    }

    /// Resolved seeds. Unresolved slots are derived on the fly.
    pub fn seeds(&self) -> Seeds {
        let mut t = self.seeds.clone();
        t.resolve(self.seed);
        Seeds {
            world: t.world.unwrap_or_default(),
            corpus: t.corpus.unwrap_or_default(),
            encoders: t.encoders.unwrap_or_default(),
            init_latent: t.init_latent.unwrap_or_default(),
            init_discrete: t.init_discrete.unwrap_or_default(),
            stage1: t.stage1.unwrap_or_default(),
            stage2: t.stage2.unwrap_or_default(),
            sample: t.sample.unwrap_or_default(),
            eval: t.eval.unwrap_or_default(),
        }
    }

    /// Field-level checks, all reported together.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut check = |field: &str, r: std::result::Result<(), String>| {
            if let Err(e) = r {
                errs.push(format!("  {field}: {e}"));
            }
        };
        check("world", self.world.validate().map_err(|e| e.to_string()));
        check("schedule", self.schedule.validate().map_err(|e| e.to_string()));
        check("latent_net", self.latent_net.validate());
        check("discrete_net", self.discrete_net.validate());
        check("stage1", self.stage1.validate().map_err(|e| e.to_string()));
        check("stage2", self.stage2.validate().map_err(|e| e.to_string()));
        let eq = |what: &str, a: usize, b: usize| {
            if a == b {
                Ok(())
            } else {
                Err(format!("{a} does not match {what} = {b}"))
            }
        };
        let (w, d) = (&self.world, &self.discrete_net);
        check("discrete_net.text_vocab", eq("world.text_vocab", d.text_vocab, w.text_vocab));
        check("discrete_net.image_vocab", eq("world.image_vocab", d.image_vocab, w.image_vocab));
        let need_len = w.text_len.max(w.image_len());
        check(
            "discrete_net.max_len",
            if d.max_len >= need_len { Ok(()) } else { Err(format!("{} is shorter than the longest sequence ({need_len})", d.max_len)) },
        );
        check("latent_net.dim", eq("encoder.dim", self.latent_net.dim, self.encoder.dim));
        check("discrete_net.semantic_dim", eq("encoder.dim", d.semantic_dim, self.encoder.dim));
        check("encoder.dim", if self.encoder.dim > 0 { Ok(()) } else { Err("must be positive".into()) });
        let c = &self.corpus;
        check(
            "corpus",
            if c.text_only + c.paired > 0 && c.image_only + c.paired > 0 && c.heldout_pairs > 0 {
                Ok(())
            } else {
                Err("need training items of both modalities and at least one held-out pair".into())
            },
        );
        let e = &self.eval;
        check("eval.steps", if e.steps > 0 { Ok(()) } else { Err("must be positive".into()) });
        check(
            "eval.temperature",
            if e.temperature >= 0.0 && e.temperature.is_finite() { Ok(()) } else { Err("must be finite and non-negative".into()) },
        );
        check("eval.samples_per_condition", if e.samples_per_condition > 0 { Ok(()) } else { Err("must be positive".into()) });
        check(
            "eval.bleu_orders",
            if !e.bleu_orders.is_empty() && !e.bleu_orders.contains(&0) { Ok(()) } else { Err("need at least one positive order".into()) },
        );
        check(
            "eval.cross_modal_threshold",
            if (0.0..=1.0).contains(&e.cross_modal_threshold) { Ok(()) } else { Err("must be in [0, 1]".into()) },
        );
        check("eval.elbo_draws", if e.elbo_draws > 0 { Ok(()) } else { Err("must be positive".into()) });
        let r = self.ablation.fixed_mask_rate;
        check("ablation.fixed_mask_rate", if r > 0.0 && r <= 1.0 { Ok(()) } else { Err("must be in (0, 1]".into()) });
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 12 hex digits of SHA-256 over the resolved config with
    /// `output_dir` cleared.
    pub fn run_id(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults_with_resolved_seeds() {
        let c = ExperimentConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c.stage2.iterations, 5000);
        let want = derive_seed(0, "stage2") & SEED_MASK;
        assert_eq!(c.seeds.stage2, Some(want));
        assert_eq!(c.stage2.seed, want);
    }

    #[test]
    fn echo_round_trips() {
        let c = ExperimentConfig::from_toml_str("seed = 9\n[stage2]\nfixed_mask_rate = 0.15\n", &[]).unwrap();
        let back = ExperimentConfig::from_toml_str(&c.to_toml(), &[]).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.run_id(), back.run_id());
    }

    #[test]
    fn overrides_and_field_diagnostics() {
        let c = ExperimentConfig::from_toml_str("", &["stage2.iterations=7".into(), "eval.policy=random".into()]).unwrap();
        assert_eq!(c.stage2.iterations, 7);
        assert_eq!(c.eval.policy, UnmaskPolicy::Random);
        let e = ExperimentConfig::from_toml_str("", &["discrete_net.text_vocab=60".into(), "stage1.learning_rate=0".into()]).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("discrete_net.text_vocab") && msg.contains("stage1"), "{msg}");
        assert!(ExperimentConfig::from_toml_str("", &["nonsense".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str("bogus = 1", &[]).is_err());
    }

    #[test]
    fn run_id_ignores_output_dir_but_not_seed() {
        let a = ExperimentConfig::from_toml_str("", &[]).unwrap();
        let b = ExperimentConfig::from_toml_str("output_dir = \"elsewhere\"", &[]).unwrap();
        let c = ExperimentConfig::from_toml_str("seed = 1", &[]).unwrap();
        assert_eq!(a.run_id(), b.run_id());
        assert_ne!(a.run_id(), c.run_id());
        assert_eq!(a.run_id().len(), 12);
    }
}
