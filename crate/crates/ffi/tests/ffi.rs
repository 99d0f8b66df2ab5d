use std::ffi::{c_char, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use comdad::config::ExperimentConfig;
use comdad::pipeline::{self, Arm, RunContext};
use comdad_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { comdad_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf.iter().take(n.min(255)).map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

#[test]
fn schedule_helpers_match_closed_forms() {
    let mut g = 0.0;
    assert_eq!(unsafe { comdad_gamma_at(ComdadMaskKind::Linear, 0.5, &mut g) }, ComdadStatus::Ok);
    assert!((g - 0.5).abs() < 1e-12);
    assert_eq!(unsafe { comdad_gamma_at(ComdadMaskKind::Cosine, 0.5, &mut g) }, ComdadStatus::Ok);
    assert!((g - (1.0 - (std::f64::consts::PI / 4.0).cos())).abs() < 1e-12);

    let mut a = 0.0;
    assert_eq!(unsafe { comdad_alpha_bar_at(0.1, 20.0, 0.3, &mut a) }, ComdadStatus::Ok);
    let integral: f64 = 0.1 * 0.3 + 0.5 * (20.0 - 0.1) * 0.09;
    assert!((a - (-integral).exp()).abs() < 1e-12);

    let mut budget = [0usize; 4];
    assert_eq!(unsafe { comdad_unmask_budget(ComdadMaskKind::Linear, 10, 4, budget.as_mut_ptr(), 4) }, ComdadStatus::Ok);
    assert_eq!(budget.iter().sum::<usize>(), 10);
}

#[test]
fn errors_carry_status_and_message() {
    assert_eq!(unsafe { comdad_gamma_at(ComdadMaskKind::Linear, 0.5, ptr::null_mut()) }, ComdadStatus::NullPointer);
    assert!(last_error().contains("out"));

    let mut g = 0.0;
    assert_eq!(unsafe { comdad_gamma_at(ComdadMaskKind::Linear, 1.5, &mut g) }, ComdadStatus::InvalidArgument);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { comdad_gamma_at(ComdadMaskKind::Linear, 0.2, &mut g) }, ComdadStatus::Ok);
    assert_eq!(last_error(), "");

    let mut small = [0usize; 2];
    assert_eq!(unsafe { comdad_unmask_budget(ComdadMaskKind::Linear, 10, 4, small.as_mut_ptr(), 2) }, ComdadStatus::BufferTooSmall);

    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/run").unwrap();
    assert_eq!(unsafe { comdad_model_load(missing.as_ptr(), &mut model) }, ComdadStatus::Io);
    assert!(model.is_null());
    unsafe { comdad_model_free(ptr::null_mut()) };
}

#[test]
fn bleu_of_identical_sequences_is_100() {
    let x = [1u32, 2, 3, 4, 5];
    let mut b = 0.0;
    assert_eq!(unsafe { comdad_bleu(x.as_ptr(), x.len(), x.as_ptr(), x.len(), 2, &mut b) }, ComdadStatus::Ok);
    assert!((b - 100.0).abs() < 1e-9);
}

fn tiny_run(root: &Path) -> RunContext {
    let overrides: Vec<String> = vec![
        format!("output_dir={:?}", root.display().to_string()),
        "corpus.text_only=40".into(),
        "corpus.image_only=40".into(),
        "corpus.paired=40".into(),
        "corpus.heldout_pairs=8".into(),
        "stage1.iterations=5".into(),
        "stage2.iterations=5".into(),
        "discrete_net.width=16".into(),
        "discrete_net.ff_width=16".into(),
    ];
    let cfg = ExperimentConfig::from_toml_str("", &overrides).unwrap().resolved().unwrap();
    let ctx = RunContext::create(cfg).unwrap();
    pipeline::gen_data(&ctx).unwrap();
    pipeline::train_latent(&ctx).unwrap();
    pipeline::train_discrete(&ctx, Arm::Full).unwrap();
    ctx
}

#[test]
fn loaded_model_samples_within_vocab() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = tiny_run(dir.path());
    let path = CString::new(ctx.dir.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { comdad_model_load(path.as_ptr(), &mut model) }, ComdadStatus::Ok, "{}", last_error());

    let mut len = 0;
    assert_eq!(unsafe { comdad_model_seq_len(model, ComdadModality::Text, &mut len) }, ComdadStatus::Ok);
    assert_eq!(len, ctx.config.world.text_len);

    let mut tokens = vec![0u32; len];
    let (mut n, mut evals) = (0, 0);
    let status = unsafe {
        comdad_model_sample(model, ComdadModality::Text, 4, ComdadPolicy::Confidence, 1.0, 9, ptr::null(), 0, tokens.as_mut_ptr(), len, &mut n, &mut evals)
    };
    assert_eq!(status, ComdadStatus::Ok, "{}", last_error());
    assert_eq!((n, evals), (len, 4));
    assert!(tokens.iter().all(|&t| (t as usize) < ctx.config.world.text_vocab));

    // Same seed, same tokens; conditioning vector accepted.
    let cond = vec![0.25; ctx.config.encoder.dim];
    let mut again = vec![0u32; len];
    let status = unsafe {
        comdad_model_sample(model, ComdadModality::Text, 4, ComdadPolicy::Confidence, 1.0, 9, ptr::null(), 0, again.as_mut_ptr(), len, &mut n, ptr::null_mut())
    };
    assert_eq!(status, ComdadStatus::Ok);
    assert_eq!(tokens, again);
    let status = unsafe {
        comdad_model_sample(model, ComdadModality::Text, len, ComdadPolicy::LeftToRight, 0.0, 1, cond.as_ptr(), cond.len(), again.as_mut_ptr(), len, &mut n, &mut evals)
    };
    assert_eq!(status, ComdadStatus::Ok, "{}", last_error());
    assert_eq!(evals, len);

    let status = unsafe {
        comdad_model_sample(model, ComdadModality::Text, 4, ComdadPolicy::Confidence, 1.0, 9, cond.as_ptr(), 3, again.as_mut_ptr(), len, &mut n, ptr::null_mut())
    };
    assert_eq!(status, ComdadStatus::InvalidArgument);
    let status = unsafe {
        comdad_model_sample(model, ComdadModality::Image, 4, ComdadPolicy::Random, 1.0, 9, ptr::null(), 0, again.as_mut_ptr(), 3, &mut n, ptr::null_mut())
    };
    assert_eq!(status, ComdadStatus::BufferTooSmall);
    assert_eq!(n, ctx.config.world.image_len());
    unsafe { comdad_model_free(model) };
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("comdad.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["comdad_model_load", "comdad_model_sample", "comdad_model_free", "comdad_last_error_message", "COMDAD_STATUS_BUFFER_TOO_SMALL"] {
        assert!(text.contains(f), "header lacks {f}");
    }
    // Compile check only where a C compiler is installed.
    if let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"]).arg(&header).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
