use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn comdad(root: &Path, extra: &[&str], args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_comdad"));
    cmd.arg("--set").arg(format!("output_dir={:?}", root.display().to_string()));
    for s in [
        "corpus.text_only=40",
        "corpus.image_only=40",
        "corpus.paired=40",
        "corpus.heldout_pairs=8",
        "stage1.iterations=4",
        "stage2.iterations=4",
        "discrete_net.width=16",
        "discrete_net.ff_width=16",
    ]
    .iter()
    .chain(extra)
    {
        cmd.arg("--set").arg(s);
    }
    cmd.args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "status {:?}\n{}", out.status, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn run_dir(root: &Path, extra: &[&str]) -> PathBuf {
    let out = ok(&comdad(root, extra, &["config"]));
    let id = out.lines().find_map(|l| l.strip_prefix("# run id ")).expect("run id line").trim();
    root.join(id)
}

#[test]
fn bad_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = comdad(dir.path(), &["stage1.iterations=0"], &["gen-data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("iterations"));

    let out = comdad(dir.path(), &["no_such_field=3"], &["config"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_artifact_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = comdad(dir.path(), &[], &["train", "--stage", "latent"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));
}

#[test]
fn oracle_suite_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&comdad(dir.path(), &[], &["oracle"]));
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
}

#[test]
fn stages_write_under_their_run_id_only() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let run = run_dir(root, &[]);
    let other = run_dir(root, &["seed=99"]);
    assert_ne!(run, other);

    ok(&comdad(root, &["seed=99"], &["gen-data"]));
    let other_corpus = fs::read(other.join("corpus.bin")).unwrap();

    ok(&comdad(root, &[], &["gen-data"]));
    assert!(run.join("corpus.bin").exists());
    ok(&comdad(root, &[], &["train", "--stage", "latent"]));
    let stage1 = fs::read(run.join("stage1").join("params.bin")).unwrap();

    ok(&comdad(root, &[], &["train", "--stage", "discrete"]));
    assert!(run.join("stage2").join("params.bin").exists());
    assert_eq!(fs::read(run.join("stage1").join("params.bin")).unwrap(), stage1);

    let out = ok(&comdad(root, &[], &["sample", "--count", "2", "--steps", "L", "--policy", "left_to_right"]));
    assert!(out.contains("2 samples"), "{out}");
    ok(&comdad(root, &[], &["eval", "--metrics", "bleu,cost"]));
    assert!(run.join("eval").join("report.json").exists());

    assert_eq!(fs::read(other.join("corpus.bin")).unwrap(), other_corpus);
    assert!(!other.join("stage1").exists());
}
