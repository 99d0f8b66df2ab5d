//! Run directories and the end-to-end steps the CLI drives.
//!
//! Layout under `<output_dir>/<run id>/`:
//!
//! ```text
//! config.toml                 resolved config echo
//! corpus.bin
//! stage1/  params.bin optimizer.bin checkpoint.json trace.jsonl [ckpt-NNNNNN.bin]
//! stage2/  (same)
//! samples/<name>.jsonl
//! eval/    report.json report.tsv
//! ablate/<arm>/{stage2,eval}/ and ablate/summary.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::{BridgeError, Encoders};
use crate::config::{ConditionSource, ConfigError, ExperimentConfig};
use crate::datagen::{gen_corpus, Corpus, DataError, Split, ToyWorld};
use crate::discrete::{sample_batch, DiffusionError, SampleRun, SamplerSettings, TrajectoryStep, UnmaskPolicy};
use crate::eval::{bleu_n, bleu_shared, cross_modal_score, decode_cost, elbo_estimate, self_bleu, unmask_order_stats, EvalError, EvalReport};
use crate::gates::GateOutcome;
use crate::latent::{ancestral_sample, LatentError, SemanticVector};
use crate::modality::Modality;
use crate::nets::{DiscreteDenoiser, Injection, LatentDenoiser};
use crate::rng;
use crate::tensor::{ParamStore, TensorError};
use crate::trainer::{encode_corpus, init_discrete, init_latent, stage1_data, train_stage1, train_stage2, AdamW, Stage, TraceRecord, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Invalid(String),
    #[error("missing {what} at {}: {hint}", path.display())]
    MissingArtifact { what: &'static str, path: PathBuf, hint: &'static str },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl PipelineError {
    /// Bad input (config, flags) rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(self, PipelineError::Config(_) | PipelineError::Invalid(_))
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> PipelineError {
    let context = context.into();
    move |source| PipelineError::Io { context, source }
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(format!("creating {}", parent.display())))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(format!("writing {}", tmp.display())))?;
        f.write_all(bytes).map_err(io_err(format!("writing {}", tmp.display())))?;
        f.sync_all().map_err(io_err(format!("syncing {}", tmp.display())))?;
    }
    fs::rename(&tmp, path).map_err(io_err(format!("renaming to {}", path.display())))
}

fn read_file(path: &Path, what: &'static str, hint: &'static str) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(PipelineError::MissingArtifact { what, path: path.to_path_buf(), hint });
    }
    fs::read(path).map_err(io_err(format!("reading {}", path.display())))
}

/// Stage II training arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Full,
    NoInjection,
    FixedRate,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Full, Arm::NoInjection, Arm::FixedRate];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Full => "full",
            Arm::NoInjection => "no_injection",
            Arm::FixedRate => "fixed_rate",
        }
    }

    /// Injection mode used when sampling from this arm.
    pub fn injection(self) -> Injection {
        match self {
            Arm::NoInjection => Injection::Masked,
            _ => Injection::Active,
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown arm `{s}` (full, no_injection, fixed_rate)"))
    }
}

/// Metrics selectable by `eval --metrics`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bleu,
    SelfBleu,
    Order,
    CrossModal,
    Cost,
    Elbo,
    Loss,
}

impl Metric {
    pub const ALL: [Metric; 7] = [Metric::Bleu, Metric::SelfBleu, Metric::Order, Metric::CrossModal, Metric::Cost, Metric::Elbo, Metric::Loss];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Bleu => "bleu",
            Metric::SelfBleu => "self_bleu",
            Metric::Order => "order",
            Metric::CrossModal => "cross_modal",
            Metric::Cost => "cost",
            Metric::Elbo => "elbo",
            Metric::Loss => "loss",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown metric `{s}` (bleu, self_bleu, order, cross_modal, cost, elbo, loss)"))
    }
}

/// Contents of `checkpoint.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub run_id: String,
    pub stage: Stage,
    pub arm: Option<Arm>,
    pub step: usize,
    pub iterations: usize,
    pub optimizer_steps: u64,
    pub params: String,
    pub optimizer: String,
    pub config: String,
    /// Step `s` draws from `substream(rng_seed, rng_label, s)`, so the next
    /// step index is the whole generator state.
    pub rng_seed: u64,
    pub rng_label: String,
    pub next_step: usize,
}

/// One line of a samples file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub modality: Modality,
    pub tokens: Vec<u32>,
    pub factor: Option<usize>,
    pub condition: ConditionSource,
    /// Corpus record whose encoding conditioned this sample.
    pub source_record: Option<usize>,
    pub evaluations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<Vec<TrajectoryStep>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleRequest {
    pub arm: Arm,
    pub modality: Modality,
    pub count: usize,
    pub steps: usize,
    pub policy: UnmaskPolicy,
    pub temperature: f64,
    pub condition: ConditionSource,
    pub trajectory: bool,
}

/// A resolved config bound to its run directory.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub config: ExperimentConfig,
    pub id: String,
    pub dir: PathBuf,
}

impl RunContext {
    /// Creates the run directory and writes the config echo, or checks an
    /// existing echo matches.
    pub fn create(config: ExperimentConfig) -> Result<Self> {
        let id = config.run_id();
        let dir = config.output_dir.join(&id);
        fs::create_dir_all(&dir).map_err(io_err(format!("creating {}", dir.display())))?;
        let echo = config.to_toml();
        let path = dir.join("config.toml");
        if path.exists() {
            let existing = fs::read_to_string(&path).map_err(io_err(format!("reading {}", path.display())))?;
            let existing = ExperimentConfig::from_toml_str(&existing, &[])?;
            let mut mine = config.clone();
            mine.output_dir = existing.output_dir.clone();
            if existing != mine {
                return Err(PipelineError::Invalid(format!("{} holds a different config", path.display())));
            }
        } else {
            write_atomic(&path, echo.as_bytes())?;
        }
        Ok(RunContext { config, id, dir })
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.dir.join("corpus.bin")
    }

    fn arm_root(&self, arm: Arm) -> PathBuf {
        match arm {
            Arm::Full => self.dir.clone(),
            other => self.dir.join("ablate").join(other.name()),
        }
    }

    pub fn stage_dir(&self, stage: Stage, arm: Arm) -> PathBuf {
        match stage {
            Stage::Latent => self.dir.join("stage1"),
            Stage::Discrete => self.arm_root(arm).join("stage2"),
        }
    }

    pub fn eval_dir(&self, arm: Arm) -> PathBuf {
        self.arm_root(arm).join("eval")
    }

    pub fn samples_dir(&self, arm: Arm) -> PathBuf {
        self.arm_root(arm).join("samples")
    }

    pub fn world(&self) -> Result<ToyWorld> {
        Ok(ToyWorld::new(self.config.world.clone())?)
    }

    pub fn encoders(&self) -> Encoders {
        let w = &self.config.world;
        Encoders::new(w.text_vocab, w.image_vocab, w.text_len.max(w.image_len()), self.config.encoder.dim, self.config.seeds().encoders)
    }

    pub fn latent_net(&self) -> LatentDenoiser {
        LatentDenoiser::new(self.config.latent_net.clone())
    }

    pub fn discrete_net(&self) -> DiscreteDenoiser {
        DiscreteDenoiser::new(self.config.discrete_net.clone())
    }

    pub fn stage2_config(&self, arm: Arm) -> TrainConfig {
        let mut c = self.config.stage2.clone();
        match arm {
            Arm::Full => {}
            Arm::NoInjection => c.no_injection = true,
            Arm::FixedRate => c.fixed_mask_rate = Some(self.config.ablation.fixed_mask_rate),
        }
        c
    }
}

pub fn gen_data(ctx: &RunContext) -> Result<Corpus> {
    let world = ctx.world()?;
    let corpus = gen_corpus(&world, ctx.config.corpus, ctx.config.seeds().corpus)?;
    write_atomic(&ctx.corpus_path(), &corpus.to_bytes())?;
    Ok(corpus)
}

pub fn load_corpus(ctx: &RunContext) -> Result<Corpus> {
    let bytes = read_file(&ctx.corpus_path(), "corpus", "run `gen-data` first")?;
    let corpus = Corpus::from_bytes(&bytes)?;
    if corpus.world.config != ctx.config.world {
        return Err(PipelineError::Invalid("corpus.bin was generated with different world settings".into()));
    }
    Ok(corpus)
}

pub fn load_params(ctx: &RunContext, stage: Stage, arm: Arm) -> Result<ParamStore> {
    let (what, hint) = match stage {
        Stage::Latent => ("stage 1 parameters", "run `train --stage latent` first"),
        Stage::Discrete if arm == Arm::Full => ("stage 2 parameters", "run `train --stage discrete` first"),
        Stage::Discrete => ("ablation arm parameters", "run `ablate` first"),
    };
    let bytes = read_file(&ctx.stage_dir(stage, arm).join("params.bin"), what, hint)?;
    Ok(ParamStore::from_bytes(&bytes)?)
}

pub fn load_trace(ctx: &RunContext, stage: Stage, arm: Arm) -> Result<Vec<TraceRecord>> {
    let path = ctx.stage_dir(stage, arm).join("trace.jsonl");
    let bytes = read_file(&path, "loss trace", "train the stage first")?;
    String::from_utf8_lossy(&bytes)
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| PipelineError::Invalid(format!("{}: {e}", path.display()))))
        .collect()
}

fn write_stage(ctx: &RunContext, stage: Stage, arm: Option<Arm>, cfg: &TrainConfig, store: &ParamStore, trace: &[TraceRecord], optimizer: Option<&AdamW>) -> Result<()> {
    let dir = ctx.stage_dir(stage, arm.unwrap_or(Arm::Full));
    write_atomic(&dir.join("params.bin"), &store.to_bytes())?;
    let opt_steps = match optimizer {
        Some(o) => {
            write_atomic(&dir.join("optimizer.bin"), &o.state()?.to_bytes())?;
            o.steps_taken()
        }
        None => 0,
    };
    let mut lines = String::new();
    for r in trace {
        lines.push_str(&serde_json::to_string(r).expect("trace serializes"));
        lines.push('\n');
    }
    write_atomic(&dir.join("trace.jsonl"), lines.as_bytes())?;
    let meta = checkpoint_meta(ctx, stage, arm, cfg, cfg.iterations, opt_steps, "params.bin", "optimizer.bin");
    write_atomic(&dir.join("checkpoint.json"), (serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n").as_bytes())
}

#[allow(clippy::too_many_arguments)]
fn checkpoint_meta(ctx: &RunContext, stage: Stage, arm: Option<Arm>, cfg: &TrainConfig, step: usize, opt_steps: u64, params: &str, optimizer: &str) -> CheckpointMeta {
    CheckpointMeta {
        run_id: ctx.id.clone(),
        stage,
        arm,
        step,
        iterations: cfg.iterations,
        optimizer_steps: opt_steps,
        params: params.to_string(),
        optimizer: optimizer.to_string(),
        config: "../config.toml".into(),
        rng_seed: cfg.seed,
        rng_label: match stage {
            Stage::Latent => "stage1.step".into(),
            Stage::Discrete => "stage2.step".into(),
        },
        next_step: step,
    }
}

/// Intermediate checkpoint writer: params and optimizer state every
/// `checkpoint_every` steps, with `checkpoint.json` pointing at the latest.
fn checkpoint_writer<'a>(ctx: &'a RunContext, stage: Stage, arm: Option<Arm>, cfg: &'a TrainConfig) -> impl FnMut(usize, &ParamStore, &AdamW) -> std::io::Result<()> + 'a {
    let dir = ctx.stage_dir(stage, arm.unwrap_or(Arm::Full));
    move |step, store, opt| {
        let params = format!("ckpt-{step:06}.bin");
        let optimizer = format!("ckpt-{step:06}.optimizer.bin");
        let state = opt.state().map_err(|e| std::io::Error::other(e.to_string()))?;
        let to_io = |e: PipelineError| std::io::Error::other(e.to_string());
        write_atomic(&dir.join(&params), &store.to_bytes()).map_err(to_io)?;
        write_atomic(&dir.join(&optimizer), &state.to_bytes()).map_err(to_io)?;
        let meta = checkpoint_meta(ctx, stage, arm, cfg, step, opt.steps_taken(), &params, &optimizer);
        write_atomic(&dir.join("checkpoint.json"), (serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n").as_bytes()).map_err(to_io)
    }
}

pub fn train_latent(ctx: &RunContext) -> Result<Vec<TraceRecord>> {
    let corpus = load_corpus(ctx)?;
    let encodings = encode_corpus(&corpus, &ctx.encoders())?;
    let data = stage1_data(&corpus, &encodings);
    let den = ctx.latent_net();
    let mut store = init_latent(&den, ctx.config.seeds().init_latent)?;
    let cfg = ctx.config.stage1.clone();
    let (trace, opt) = train_with_checkpoints(ctx, Stage::Latent, None, &cfg, |hook| train_stage1(&cfg, &ctx.config.schedule, &den, &data, &mut store, Some(hook)))?;
    write_stage(ctx, Stage::Latent, None, &cfg, &store, &trace, opt.as_ref())?;
    Ok(trace)
}

/// Runs a trainer with a hook that writes intermediate checkpoints and keeps
/// the optimizer state seen at the final step.
fn train_with_checkpoints<T>(
    ctx: &RunContext,
    stage: Stage,
    arm: Option<Arm>,
    cfg: &TrainConfig,
    run: impl FnOnce(&mut crate::trainer::CheckpointHook<'_>) -> crate::trainer::Result<T>,
) -> Result<(T, Option<AdamW>)> {
    let mut writer = checkpoint_writer(ctx, stage, arm, cfg);
    let mut last: Option<AdamW> = None;
    let every = cfg.checkpoint_every;
    let total = cfg.iterations;
    let mut hook = |step: usize, store: &ParamStore, opt: &AdamW| -> std::io::Result<()> {
        if every > 0 && step % every == 0 && step != total {
            writer(step, store, opt)?;
        }
        if step == total {
            last = Some(opt.clone());
        }
        Ok(())
    };
    let out = run(&mut hook)?;
    Ok((out, last))
}

pub fn train_discrete(ctx: &RunContext, arm: Arm) -> Result<Vec<TraceRecord>> {
    // Stage I is frozen here; it only has to exist.
    load_params(ctx, Stage::Latent, Arm::Full)?;
    let corpus = load_corpus(ctx)?;
    let encodings = encode_corpus(&corpus, &ctx.encoders())?;
    let den = ctx.discrete_net();
    let mut store = init_discrete(&den, ctx.config.seeds().init_discrete)?;
    let cfg = ctx.stage2_config(arm);
    let (trace, opt) = train_with_checkpoints(ctx, Stage::Discrete, Some(arm), &cfg, |hook| {
        train_stage2(&cfg, &ctx.config.schedule, &den, &corpus, &encodings, &mut store, Some(hook))
    })?;
    write_stage(ctx, Stage::Discrete, Some(arm), &cfg, &store, &trace, opt.as_ref())?;
    Ok(trace)
}

/// Conditioning vectors for `count` samples of modality `m`, with the corpus
/// record each came from (held-out source) or `None` (prior source).
fn conditions(ctx: &RunContext, corpus: &Corpus, encoders: &Encoders, m: Modality, count: usize, source: ConditionSource, label: &str) -> Result<(Vec<SemanticVector>, Vec<Option<usize>>)> {
    match source {
        ConditionSource::Heldout => {
            let pairs = corpus.pairs(Split::Heldout);
            if pairs.is_empty() {
                return Err(PipelineError::Invalid("corpus has no held-out pairs".into()));
            }
            let mut conds = Vec::with_capacity(count);
            let mut src = Vec::with_capacity(count);
            for j in 0..count {
                let (t, i) = pairs[j % pairs.len()];
                let rec = if m == Modality::Text { t } else { i };
                conds.push(encoders.encode(&corpus.records[rec].tokens)?);
                src.push(Some(rec));
            }
            Ok((conds, src))
        }
        ConditionSource::Prior => {
            let store = load_params(ctx, Stage::Latent, Arm::Full)?;
            let den = ctx.latent_net();
            let mut r = rng::stream(ctx.config.seeds().sample, label);
            let conds = ancestral_sample(&den, &store, &ctx.config.schedule, &vec![m; count], &mut r)?;
            Ok((conds, vec![None; count]))
        }
    }
}

fn settings_for(arm: Arm, steps: usize, policy: UnmaskPolicy, temperature: f64) -> SamplerSettings {
    SamplerSettings { steps, policy, temperature, injection: arm.injection() }
}

fn generate(ctx: &RunContext, store: &ParamStore, m: Modality, conds: &[SemanticVector], settings: &SamplerSettings, seed: u64, label: &str) -> Result<Vec<SampleRun>> {
    let den = ctx.discrete_net();
    let len = ctx.config.world.clone();
    let len = if m == Modality::Text { len.text_len } else { len.image_len() };
    let mut rngs: Vec<rng::Rng> = (0..conds.len()).map(|j| rng::substream(seed, label, j as u64)).collect();
    Ok(sample_batch(&den, store, &ctx.config.schedule, m, len, Some(conds), settings, &mut rngs)?)
}

pub fn sample_file_name(req: &SampleRequest) -> String {
    let policy = serde_json::to_value(req.policy).expect("policy serializes");
    let cond = serde_json::to_value(req.condition).expect("source serializes");
    format!(
        "{}-{}-k{}-t{}-{}-n{}.jsonl",
        req.modality,
        policy.as_str().unwrap_or("policy"),
        req.steps,
        req.temperature,
        cond.as_str().unwrap_or("cond"),
        req.count
    )
}

/// Samples tokens and writes them, one JSON record per line, under the arm's
/// `samples/` directory. Returns the file path and the records.
pub fn sample(ctx: &RunContext, req: &SampleRequest) -> Result<(PathBuf, Vec<SampleRecord>)> {
    if req.count == 0 || req.steps == 0 {
        return Err(PipelineError::Invalid("count and steps must be positive".into()));
    }
    if !(req.temperature >= 0.0 && req.temperature.is_finite()) {
        return Err(PipelineError::Invalid("temperature must be finite and non-negative".into()));
    }
    let corpus = load_corpus(ctx)?;
    let store = load_params(ctx, Stage::Discrete, req.arm)?;
    let encoders = ctx.encoders();
    let (conds, sources) = conditions(ctx, &corpus, &encoders, req.modality, req.count, req.condition, "sample.prior")?;
    let settings = settings_for(req.arm, req.steps, req.policy, req.temperature);
    let runs = generate(ctx, &store, req.modality, &conds, &settings, ctx.config.seeds().sample, "sample.tokens")?;
    let world = &corpus.world;
    let records: Vec<SampleRecord> = runs
        .into_iter()
        .zip(sources)
        .enumerate()
        .map(|(index, (run, source_record))| SampleRecord {
            index,
            modality: req.modality,
            factor: world.recover_factor(&run.sequence, world.default_min_matches(req.modality)),
            tokens: run.sequence.tokens().to_vec(),
            condition: req.condition,
            source_record,
            evaluations: run.evaluations,
            trajectory: req.trajectory.then_some(run.trajectory),
        })
        .collect();
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).expect("sample serializes"));
        text.push('\n');
    }
    let path = ctx.samples_dir(req.arm).join(sample_file_name(req));
    write_atomic(&path, text.as_bytes())?;
    Ok((path, records))
}

/// Conditioned text samples for evaluation plus the references each is
/// scored against: held-out texts sharing the conditioning item's factor, or
/// every held-out text when conditions come from the prior.
struct TextEval {
    runs: Vec<SampleRun>,
    refs: Vec<Vec<usize>>,
}

fn eval_text(ctx: &RunContext, corpus: &Corpus, encoders: &Encoders, store: &ParamStore, settings: &SamplerSettings, label: &str) -> Result<TextEval> {
    let e = &ctx.config.eval;
    let heldout_texts: Vec<usize> = corpus.pairs(Split::Heldout).into_iter().map(|(t, _)| t).collect();
    let count = heldout_texts.len() * e.samples_per_condition;
    let (conds, sources) = conditions(ctx, corpus, encoders, Modality::Text, count, e.condition, "eval.prior")?;
    let runs = generate(ctx, store, Modality::Text, &conds, settings, ctx.config.seeds().eval, label)?;
    let refs = sources
        .iter()
        .map(|s| match s {
            Some(rec) => {
                let f = corpus.records[*rec].factor;
                heldout_texts.iter().copied().filter(|&t| corpus.records[t].factor == f).collect()
            }
            None => heldout_texts.clone(),
        })
        .collect();
    Ok(TextEval { runs, refs })
}

fn bleu_against(corpus: &Corpus, te: &TextEval, n: usize) -> Result<f64> {
    let cands: Vec<&[u32]> = te.runs.iter().map(|r| r.sequence.tokens()).collect();
    let refs: Vec<Vec<&[u32]>> = te.refs.iter().map(|rs| rs.iter().map(|&i| corpus.records[i].tokens.tokens()).collect()).collect();
    Ok(bleu_n(&cands, &refs, n)?)
}

/// Computes the selected metrics for one arm and writes
/// `eval/report.{json,tsv}` under the arm's directory.
pub fn evaluate(ctx: &RunContext, arm: Arm, metrics: &[Metric]) -> Result<EvalReport> {
    let e = ctx.config.eval.clone();
    let corpus = load_corpus(ctx)?;
    let store = load_params(ctx, Stage::Discrete, arm)?;
    let encoders = ctx.encoders();
    let seeds = ctx.config.seeds();
    let settings = settings_for(arm, e.steps, e.policy, e.temperature);
    let mut report = EvalReport::default();
    report.setting("run_id", &ctx.id);
    report.setting("arm", arm);
    report.setting("eval_seed", seeds.eval);
    report.setting("steps", e.steps);
    report.setting("policy", e.policy);
    report.setting("temperature", e.temperature);
    report.setting("condition", e.condition);
    report.setting("samples_per_condition", e.samples_per_condition);

    let needs_text = metrics.iter().any(|m| matches!(m, Metric::Bleu | Metric::SelfBleu | Metric::Order | Metric::Cost));
    let text = if needs_text { Some(eval_text(ctx, &corpus, &encoders, &store, &settings, "eval.text")?) } else { None };
    let world = &corpus.world;
    if let Some(te) = &text {
        report.setting("text_samples", te.runs.len());
        let hits = te
            .runs
            .iter()
            .zip(&te.refs)
            .filter(|(run, refs)| {
                let f = world.recover_factor(&run.sequence, world.default_min_matches(Modality::Text));
                f.is_some() && refs.iter().all(|&i| Some(corpus.records[i].factor as usize) == f)
            })
            .count();
        if e.condition == ConditionSource::Heldout {
            report.insert("text_factor_accuracy", hits as f64 / te.runs.len() as f64)?;
        }
    }
    for &metric in metrics {
        match metric {
            Metric::Bleu => {
                let te = text.as_ref().expect("text samples drawn");
                let all: Vec<&[u32]> = corpus.pairs(Split::Heldout).into_iter().map(|(t, _)| corpus.records[t].tokens.tokens()).collect();
                let cands: Vec<&[u32]> = te.runs.iter().map(|r| r.sequence.tokens()).collect();
                for &n in &e.bleu_orders {
                    report.insert(format!("bleu{n}"), bleu_against(&corpus, te, n)?)?;
                    report.insert(format!("bleu{n}_shared"), bleu_shared(&cands, &all, n)?)?;
                }
                report.setting("bleu_references", if e.condition == ConditionSource::Heldout { "heldout texts sharing the condition's factor" } else { "all heldout texts" });
            }
            Metric::SelfBleu => {
                let te = text.as_ref().expect("text samples drawn");
                let cands: Vec<&[u32]> = te.runs.iter().map(|r| r.sequence.tokens()).collect();
                for &n in &e.bleu_orders {
                    report.insert(format!("self_bleu{n}"), self_bleu(&cands, n)?)?;
                }
            }
            Metric::Order => {
                let te = text.as_ref().expect("text samples drawn");
                let trajs: Vec<&[TrajectoryStep]> = te.runs.iter().map(|r| r.trajectory.as_slice()).collect();
                let mut r = rng::stream(seeds.eval, "eval.bootstrap");
                let os = unmask_order_stats(&trajs, world, Modality::Text, e.bootstrap, &mut r)?;
                report.insert("order.content_mean_step", os.content_mean_step)?;
                report.insert("order.filler_mean_step", os.filler_mean_step)?;
                report.insert("order.gap", os.gap)?;
                report.insert("order.ci_low", os.ci_low)?;
                report.insert("order.ci_high", os.ci_high)?;
                report.setting("bootstrap", e.bootstrap);
            }
            Metric::CrossModal => {
                let pairs = corpus.pairs(Split::Heldout);
                let cm = cross_modal_score(&ctx.discrete_net(), &store, &ctx.config.schedule, &encoders, &corpus, &pairs, &settings, seeds.eval)?;
                report.insert("cross_modal.accuracy", cm.cross_accuracy)?;
                report.insert("cross_modal.self_accuracy", cm.self_accuracy)?;
                report.insert("cross_modal.meets_threshold", f64::from(u8::from(cm.cross_accuracy >= e.cross_modal_threshold)))?;
                report.setting("cross_modal_threshold", e.cross_modal_threshold);
                report.setting("cross_modal_pairs", cm.pairs);
            }
            Metric::Cost => {
                let te = text.as_ref().expect("text samples drawn");
                let cost = decode_cost(&te.runs[0]);
                let len = world.len(Modality::Text);
                let ar_settings = settings_for(arm, len, UnmaskPolicy::LeftToRight, e.temperature);
                let ar = eval_text(ctx, &corpus, &encoders, &store, &ar_settings, "eval.text.ar")?;
                let ar_cost = decode_cost(&ar.runs[0]);
                report.insert("cost.evaluations", cost.evaluations as f64)?;
                report.insert("cost.tokens_per_evaluation", cost.tokens_per_evaluation)?;
                report.insert("cost.ar_evaluations", ar_cost.evaluations as f64)?;
                report.insert("cost.reduction", ar_cost.evaluations as f64 / cost.evaluations as f64)?;
                report.insert("bleu2_ar", bleu_against(&corpus, &ar, 2)?)?;
                report.insert("bleu2_parallel_minus_ar", bleu_against(&corpus, te, 2)? - bleu_against(&corpus, &ar, 2)?)?;
            }
            Metric::Elbo => {
                let den = ctx.discrete_net();
                let heldout: Vec<(usize, usize)> = corpus.pairs(Split::Heldout);
                let mut r = rng::stream(seeds.eval, "eval.elbo");
                let mut per_token = Vec::new();
                for &(t, _) in heldout.iter().take(e.elbo_items) {
                    let x = &corpus.records[t].tokens;
                    let cond = encoders.encode(x)?;
                    let est = elbo_estimate(&den, &store, &ctx.config.schedule, x, Some(&cond), arm.injection(), e.steps, e.elbo_draws, &mut r)?;
                    per_token.push(est.mean / x.len() as f64);
                }
                if !per_token.is_empty() {
                    let n = per_token.len() as f64;
                    let mean = per_token.iter().sum::<f64>() / n;
                    report.insert("elbo.per_token", mean)?;
                    report.setting("elbo_items", per_token.len());
                    report.setting("elbo_draws", e.elbo_draws);
                }
            }
            Metric::Loss => {
                for (stage, a, name) in [(Stage::Latent, Arm::Full, "loss.stage1"), (Stage::Discrete, arm, "loss.stage2")] {
                    if let Ok(trace) = load_trace(ctx, stage, a) {
                        for rec in &trace {
                            report.push_series(rec.step, name, rec.loss)?;
                            if let Some(f) = rec.masked_fraction {
                                report.push_series(rec.step, "masked_fraction.stage2", f)?;
                            }
                        }
                        if let Some(last) = trace.last() {
                            report.insert(format!("{name}.final"), last.loss)?;
                        }
                    }
                }
            }
        }
    }
    let dir = ctx.eval_dir(arm);
    write_atomic(&dir.join("report.json"), report.to_json().as_bytes())?;
    write_atomic(&dir.join("report.tsv"), report.to_tsv().as_bytes())?;
    Ok(report)
}

/// Ablation orderings checked by `ablate`.
pub const SCHEDULE_BLEU_MARGIN: f64 = 15.0;
pub const INJECTION_FROM_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationSummary {
    pub run_id: String,
    pub reports: BTreeMap<String, EvalReport>,
    pub gates: Vec<GateOutcome>,
}

fn metric(report: &EvalReport, name: &str) -> Result<f64> {
    report.metrics.get(name).copied().ok_or_else(|| PipelineError::Invalid(format!("report lacks {name}")))
}

/// Variable-rate BLEU-2 at least 15 points above fixed-rate, and fixed-rate
/// Self-BLEU-2 above variable-rate.
pub fn schedule_gate(full: &EvalReport, fixed: &EvalReport) -> Result<GateOutcome> {
    let (bf, bx) = (metric(full, "bleu2")?, metric(fixed, "bleu2")?);
    let (sf, sx) = (metric(full, "self_bleu2")?, metric(fixed, "self_bleu2")?);
    Ok(GateOutcome::new(
        "schedule_ablation",
        bf - bx >= SCHEDULE_BLEU_MARGIN && sx > sf,
        format!("BLEU-2 {bf:.2} vs fixed {bx:.2} (margin {:.2}); Self-BLEU-2 fixed {sx:.2} vs {sf:.2}", bf - bx),
    ))
}

/// Injected loss strictly below the no-injection loss at every logged step
/// from 20% of training on, and higher final BLEU-2.
pub fn injection_gate(full_trace: &[TraceRecord], noinj_trace: &[TraceRecord], iterations: usize, full: &EvalReport, noinj: &EvalReport) -> Result<GateOutcome> {
    let from = (INJECTION_FROM_FRACTION * iterations as f64).ceil() as usize;
    let mut compared = 0;
    let mut violations = Vec::new();
    for (a, b) in full_trace.iter().zip(noinj_trace) {
        if a.step != b.step {
            return Err(PipelineError::Invalid("loss traces were logged at different steps".into()));
        }
        if a.step >= from {
            compared += 1;
            if a.loss >= b.loss {
                violations.push(a.step);
            }
        }
    }
    let (bf, bn) = (metric(full, "bleu2")?, metric(noinj, "bleu2")?);
    Ok(GateOutcome::new(
        "injection_ablation",
        compared > 0 && violations.is_empty() && bf > bn,
        format!("{compared} logged steps compared, {} not strictly lower {:?}; BLEU-2 {bf:.2} vs {bn:.2}", violations.len(), violations),
    ))
}

/// Variable-rate gap CI excludes zero from above.
pub fn prioritization_gate(full: &EvalReport, fixed: &EvalReport) -> Result<GateOutcome> {
    let (lo, hi, gap) = (metric(full, "order.ci_low")?, metric(full, "order.ci_high")?, metric(full, "order.gap")?);
    let fixed_gap = metric(fixed, "order.gap")?;
    let (flo, fhi) = (metric(fixed, "order.ci_low")?, metric(fixed, "order.ci_high")?);
    Ok(GateOutcome::new(
        "prioritization",
        lo > 0.0,
        format!("gap {gap:.3} CI [{lo:.3}, {hi:.3}]; fixed-rate gap {fixed_gap:.3} CI [{flo:.3}, {fhi:.3}] (informational)"),
    ))
}

/// Trains whichever arms are missing, evaluates all three and checks the
/// ablation orderings. Writes `ablate/summary.json`.
pub fn ablate(ctx: &RunContext) -> Result<AblationSummary> {
    load_params(ctx, Stage::Latent, Arm::Full)?;
    let mut reports = BTreeMap::new();
    let mut traces = BTreeMap::new();
    for arm in Arm::ALL {
        if !ctx.stage_dir(Stage::Discrete, arm).join("params.bin").exists() {
            train_discrete(ctx, arm)?;
        }
        traces.insert(arm, load_trace(ctx, Stage::Discrete, arm)?);
        let metrics: &[Metric] = if arm == Arm::Full { &Metric::ALL } else { &[Metric::Bleu, Metric::SelfBleu, Metric::Order, Metric::Loss] };
        reports.insert(arm, evaluate(ctx, arm, metrics)?);
    }
    let gates = vec![
        schedule_gate(&reports[&Arm::Full], &reports[&Arm::FixedRate])?,
        injection_gate(&traces[&Arm::Full], &traces[&Arm::NoInjection], ctx.config.stage2.iterations, &reports[&Arm::Full], &reports[&Arm::NoInjection])?,
        prioritization_gate(&reports[&Arm::Full], &reports[&Arm::FixedRate])?,
    ];
    let summary = AblationSummary {
        run_id: ctx.id.clone(),
        reports: reports.into_iter().map(|(a, r)| (a.name().to_string(), r)).collect(),
        gates,
    };
    write_atomic(&ctx.dir.join("ablate").join("summary.json"), (serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n").as_bytes())?;
    Ok(summary)
}

