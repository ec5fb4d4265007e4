//! End-to-end CLI checks through the real binary: exit codes, determinism
//! of artifacts, and the pruning flags.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_blrmoe"))
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let text = r#"
[model]
layers = 2
shared_layers = 1
d_model = 12
heads = 2
d_ffn = 16
moe_modules = ["f"]
router = "linear"

[corpus]
languages = ["zh", "en"]
alphabet_size = 4
alphabet_stride = 3
feature_dim = 6
emission_noise_std = 0.25
center_spread = 1.2
utterances_per_lang = 10
train_fraction = 0.8
seed = 11

[corpus.shift]
bias_magnitude = 0.5
scale_spread = 0.2
noise_std = 0.1
seed = 7

[train]
lambda_lid = 0.3
epochs = 1
batch_size = 4
warmup_steps = 10
lr_scale = 0.5
dropout = 0.0
grad_clip = 5.0
seed = 2

[lid_tune]
utterances_per_lang = 4
epochs = 1
batch_size = 4
warmup_steps = 5
lr_scale = 0.5
grad_clip = 5.0
seed = 3
"#;
    let p = dir.join("exp.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn train_eval_finetune_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");

    let out = bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&run).output().unwrap();
    assert!(out.status.success(), "train failed: {}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("checkpoint.blrm");
    assert!(ckpt.exists());

    let out = bin()
        .args(["eval", "--checkpoint"])
        .arg(&ckpt)
        .arg("--config")
        .arg(&cfg)
        .args(["--split", "test-shifted", "--prune-keep", "zh,en", "--routing", "argmax"])
        .output()
        .unwrap();
    assert!(out.status.success(), "eval failed: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("zh") && stdout.contains("en"), "{stdout}");

    let tuned = dir.path().join("tuned");
    let out = bin()
        .args(["finetune-router", "--checkpoint"])
        .arg(&ckpt)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&tuned)
        .output()
        .unwrap();
    assert!(out.status.success(), "finetune failed: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("frozen backbone sha256:"), "{stdout}");
}

#[test]
fn identical_runs_write_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out_dir in [&a, &b] {
        let out =
            bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(out_dir).output().unwrap();
        assert!(out.status.success());
    }
    for f in ["checkpoint.blrm", "metrics.tsv", "resolved.toml"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn validation_errors_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nlayers = 2\n").unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    // unknown language in --prune-keep is a validation error too
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&run).output().unwrap();
    let out = bin()
        .args(["eval", "--checkpoint"])
        .arg(run.join("checkpoint.blrm"))
        .arg("--config")
        .arg(&cfg)
        .args(["--prune-keep", "de"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verify_passes_clean_and_fails_with_injected_fault() {
    let out = bin().args(["verify", "--seeds", "1"]).output().unwrap();
    assert!(out.status.success(), "verify failed: {}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"), "{stdout}");
    assert!(!stdout.contains("FAIL"), "{stdout}");

    let out2 = bin().args(["verify", "--seeds", "1"]).output().unwrap();
    assert_eq!(out.stdout, out2.stdout, "verify summaries must be identical across runs");

    let faulted =
        bin().args(["verify", "--seeds", "1", "--fault", "flip-matmul-grad"]).output().unwrap();
    assert_eq!(faulted.status.code(), Some(2));
    let stdout = String::from_utf8_lossy(&faulted.stdout);
    assert!(stdout.contains("FAIL grad-matmul"), "{stdout}");
}

#[test]
fn param_count_prints_totals() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = bin().args(["param-count", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("total"), "{stdout}");
}
