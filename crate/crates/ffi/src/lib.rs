//! C ABI over the core crate.
//!
//! Every function returns a [`ComdadStatus`]; on failure a message is kept
//! per thread and can be copied out with [`comdad_last_error_message`].
//! Models are opaque handles from [`comdad_model_load`] released with
//! [`comdad_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use comdad::config::ExperimentConfig;
use comdad::discrete::{sample_batch, SamplerSettings, UnmaskPolicy};
use comdad::eval::bleu_n;
use comdad::latent::SemanticVector;
use comdad::modality::Modality;
use comdad::nets::{DiscreteDenoiser, Injection};
use comdad::rng;
use comdad::schedules::{MaskKind, NoiseSchedule};
use comdad::tensor::ParamStore;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComdadStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Runtime = 4,
    BufferTooSmall = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComdadPolicy {
    Confidence = 0,
    Random = 1,
    LeftToRight = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComdadModality {
    Text = 0,
    Image = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComdadMaskKind {
    Linear = 0,
    Cosine = 1,
}

impl From<ComdadPolicy> for UnmaskPolicy {
    fn from(p: ComdadPolicy) -> Self {
        match p {
            ComdadPolicy::Confidence => UnmaskPolicy::Confidence,
            ComdadPolicy::Random => UnmaskPolicy::Random,
            ComdadPolicy::LeftToRight => UnmaskPolicy::LeftToRight,
        }
    }
}

impl From<ComdadModality> for Modality {
    fn from(m: ComdadModality) -> Self {
        match m {
            ComdadModality::Text => Modality::Text,
            ComdadModality::Image => Modality::Image,
        }
    }
}

impl From<ComdadMaskKind> for MaskKind {
    fn from(k: ComdadMaskKind) -> Self {
        match k {
            ComdadMaskKind::Linear => MaskKind::Linear,
            ComdadMaskKind::Cosine => MaskKind::Cosine,
        }
    }
}

/// A trained Stage II model with its schedule and sequence lengths.
pub struct ComdadModel {
    denoiser: DiscreteDenoiser,
    store: ParamStore,
    schedule: NoiseSchedule,
    text_len: usize,
    image_len: usize,
    semantic_dim: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(ComdadStatus, String);

fn fail<T>(status: ComdadStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ComdadStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (ComdadStatus::Ok, String::new()),
        Ok(Err(Failure(s, m))) => (s, m),
        Err(p) => {
            let m = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            (ComdadStatus::Panic, m)
        }
    };
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
    status
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return fail(ComdadStatus::NullPointer, format!("{what} is null"));
    }
    Ok(())
}

/// # Safety
/// `p` must be null or point to `len` readable values.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure(ComdadStatus::InvalidArgument, e.to_string())
}

fn load(dir: &Path) -> Result<ComdadModel, Failure> {
    let io = |e: std::io::Error, p: &Path| Failure(ComdadStatus::Io, format!("{}: {e}", p.display()));
    let cfg_path = dir.join("config.toml");
    let text = fs::read_to_string(&cfg_path).map_err(|e| io(e, &cfg_path))?;
    let cfg = ExperimentConfig::from_toml_str(&text, &[]).and_then(|c| c.resolved()).map_err(invalid)?;
    let params_path = dir.join("stage2").join("params.bin");
    let bytes = fs::read(&params_path).map_err(|e| io(e, &params_path))?;
    let store = ParamStore::from_bytes(&bytes).map_err(invalid)?;
    Ok(ComdadModel {
        denoiser: DiscreteDenoiser::new(cfg.discrete_net.clone()),
        store,
        schedule: cfg.schedule.clone(),
        text_len: cfg.world.text_len,
        image_len: cfg.world.image_len(),
        semantic_dim: cfg.discrete_net.semantic_dim,
    })
}

/// Loads the Stage II model of a run directory (the one holding
/// `config.toml`).
///
/// # Safety
/// `run_dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn comdad_model_load(run_dir: *const c_char, out: *mut *mut ComdadModel) -> ComdadStatus {
    guard(|| {
        non_null(run_dir, "run_dir")?;
        non_null(out, "out")?;
        let dir = CStr::from_ptr(run_dir).to_str().map_err(invalid)?;
        let model = load(Path::new(dir))?;
        *out = Box::into_raw(Box::new(model));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`comdad_model_load`] and not be used afterwards.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn comdad_model_free(model: *mut ComdadModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Sequence length the model generates for `modality`.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn comdad_model_seq_len(model: *const ComdadModel, modality: ComdadModality, out: *mut usize) -> ComdadStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let m = &*model;
        *out = match modality {
            ComdadModality::Text => m.text_len,
            ComdadModality::Image => m.image_len,
        };
        Ok(())
    })
}

/// Samples one sequence into `out_tokens` (capacity `out_cap`), writing the
/// length to `out_len` and the denoiser evaluation count to `out_evals`
/// (may be null). `cond` holds `cond_len` values of a conditioning vector
/// (normalized here); pass null and 0 to sample without conditioning.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn comdad_model_sample(
    model: *const ComdadModel,
    modality: ComdadModality,
    steps: usize,
    policy: ComdadPolicy,
    temperature: f64,
    seed: u64,
    cond: *const f64,
    cond_len: usize,
    out_tokens: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
    out_evals: *mut usize,
) -> ComdadStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out_len, "out_len")?;
        let m = &*model;
        let modality_core = Modality::from(modality);
        let len = match modality {
            ComdadModality::Text => m.text_len,
            ComdadModality::Image => m.image_len,
        };
        *out_len = len;
        if out_cap < len {
            return fail(ComdadStatus::BufferTooSmall, format!("need {len} tokens, buffer holds {out_cap}"));
        }
        non_null(out_tokens, "out_tokens")?;
        let cond = slice(cond, cond_len, "cond")?;
        let conds = if cond.is_empty() {
            None
        } else {
            if cond.len() != m.semantic_dim {
                return fail(ComdadStatus::InvalidArgument, format!("cond has {} values, model expects {}", cond.len(), m.semantic_dim));
            }
            Some(vec![SemanticVector::normalized(cond.to_vec(), modality_core).ok_or_else(|| invalid("cond has zero norm or non-finite values"))?])
        };
        let settings = SamplerSettings {
            steps,
            policy: policy.into(),
            temperature,
            injection: if conds.is_some() { Injection::Active } else { Injection::Absent },
        };
        let mut rngs = vec![rng::stream(seed, "ffi.sample")];
        let runs = sample_batch(&m.denoiser, &m.store, &m.schedule, modality_core, len, conds.as_deref(), &settings, &mut rngs)
            .map_err(|e| Failure(ComdadStatus::Runtime, e.to_string()))?;
        let run = &runs[0];
        std::slice::from_raw_parts_mut(out_tokens, len).copy_from_slice(run.sequence.tokens());
        if !out_evals.is_null() {
            *out_evals = run.evaluations;
        }
        Ok(())
    })
}

fn schedule(kind: ComdadMaskKind, beta_min: f64, beta_max: f64) -> NoiseSchedule {
    NoiseSchedule { kind: kind.into(), beta_min, beta_max, ..Default::default() }
}

/// Masking marginal `gamma(t)`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn comdad_gamma_at(kind: ComdadMaskKind, t: f64, out: *mut f64) -> ComdadStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = NoiseSchedule { kind: kind.into(), ..Default::default() }.gamma_at(t).map_err(invalid)?;
        Ok(())
    })
}

/// Latent signal fraction `alpha_bar(t)` for a linear beta schedule.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn comdad_alpha_bar_at(beta_min: f64, beta_max: f64, t: f64, out: *mut f64) -> ComdadStatus {
    guard(|| {
        non_null(out, "out")?;
        let s = schedule(ComdadMaskKind::Linear, beta_min, beta_max);
        s.validate().map_err(invalid)?;
        *out = s.alpha_bar_at(t).map_err(invalid)?;
        Ok(())
    })
}

/// Tokens committed at each of `steps` reverse steps for a length-`length`
/// sequence. `out` must hold `steps` entries.
///
/// # Safety
/// `out` must be valid for `out_cap` writes.
#[no_mangle]
pub unsafe extern "C" fn comdad_unmask_budget(kind: ComdadMaskKind, length: usize, steps: usize, out: *mut usize, out_cap: usize) -> ComdadStatus {
    guard(|| {
        let b = schedule(kind, 0.1, 20.0).unmask_budget(length, steps).map_err(invalid)?;
        if out_cap < b.len() {
            return fail(ComdadStatus::BufferTooSmall, format!("need {} entries, buffer holds {out_cap}", b.len()));
        }
        non_null(out, "out")?;
        std::slice::from_raw_parts_mut(out, b.len()).copy_from_slice(&b);
        Ok(())
    })
}

/// Corpus BLEU-`n` (0 to 100) of one candidate against one reference.
///
/// # Safety
/// Token pointers must be valid for their lengths; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn comdad_bleu(candidate: *const u32, candidate_len: usize, reference: *const u32, reference_len: usize, n: usize, out: *mut f64) -> ComdadStatus {
    guard(|| {
        non_null(out, "out")?;
        let c = slice(candidate, candidate_len, "candidate")?;
        let r = slice(reference, reference_len, "reference")?;
        *out = bleu_n(&[c], &[vec![r]], n).map_err(invalid)?;
        Ok(())
    })
}

/// Copies the calling thread's last error message (NUL-terminated,
/// truncated to fit) into `buf` and returns its full length in bytes
/// without the terminator. Empty after a successful call.
///
/// # Safety
/// `buf` must be null or valid for `cap` writes.
#[no_mangle]
pub unsafe extern "C" fn comdad_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}
