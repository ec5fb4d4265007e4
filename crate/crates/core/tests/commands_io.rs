//! Command-level contracts: byte-level reproducibility of runs, corpus
//! fixtures, pruned evaluation, and router fine-tuning through the
//! command surface.

use std::path::Path;

use blrmoe::commands::{
    cmd_eval, cmd_finetune_router, cmd_gen_corpus, cmd_param_count, cmd_train, EvalSplit,
    CHECKPOINT_FILE, METRICS_FILE, RESOLVED_CONFIG_FILE,
};
use blrmoe::router::RoutingMode;

fn tiny_config() -> &'static str {
    r#"
[model]
layers = 2
shared_layers = 1
d_model = 16
heads = 2
d_ffn = 24
moe_modules = ["o", "v", "f"]
router = "tdnn"
tdnn_channels = 12

[corpus]
languages = ["zh", "en"]
alphabet_size = 4
alphabet_stride = 3
feature_dim = 8
emission_noise_std = 0.25
center_spread = 1.2
utterances_per_lang = 14
train_fraction = 0.75
seed = 404

[[corpus.confusions]]
a = "zh"
b = "en"
strength = 0.5

[corpus.shift]
bias_magnitude = 0.6
scale_spread = 0.25
noise_std = 0.1
seed = 777

[train]
lambda_lid = 0.3
epochs = 2
batch_size = 4
warmup_steps = 20
lr_scale = 0.5
dropout = 0.1
grad_clip = 5.0
seed = 17

[lid_tune]
utterances_per_lang = 6
epochs = 2
batch_size = 4
warmup_steps = 10
lr_scale = 0.5
grad_clip = 5.0
seed = 99
"#
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("exp.toml");
    std::fs::write(&p, tiny_config()).unwrap();
    p
}

#[test]
fn training_runs_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out1 = dir.path().join("run1");
    let out2 = dir.path().join("run2");
    cmd_train(&cfg, &out1).unwrap();
    cmd_train(&cfg, &out2).unwrap();
    for file in [CHECKPOINT_FILE, METRICS_FILE, RESOLVED_CONFIG_FILE, "eval_test.json"] {
        let a = std::fs::read(out1.join(file)).unwrap();
        let b = std::fs::read(out2.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn metrics_log_has_one_line_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    cmd_train(&cfg, &out).unwrap();
    let log = std::fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = log.trim().lines().collect();
    assert_eq!(lines.len(), 3, "header + 2 epochs: {log}");
    assert!(lines[0].starts_with("epoch\ttrain_total\ttrain_ctc\ttrain_lid\tter_zh\tter_en"));
    for (i, line) in lines[1..].iter().enumerate() {
        assert!(line.starts_with(&format!("{i}\t")));
    }
}

#[test]
fn eval_supports_pruning_and_corpus_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let outcome = cmd_train(&cfg, &out).unwrap();

    // full mask over the generated test split
    let report = cmd_eval(
        &outcome.checkpoint,
        &cfg,
        None,
        EvalSplit::Test,
        "all",
        RoutingMode::Argmax,
        Some(&dir.path().join("report.json")),
    )
    .unwrap();
    assert_eq!(report.per_lang.len(), 2);
    assert!(dir.path().join("report.json").exists());

    // pruned to one language: the other is excluded and reported as such
    let pruned = cmd_eval(
        &outcome.checkpoint,
        &cfg,
        None,
        EvalSplit::TestShifted,
        "zh",
        RoutingMode::Argmax,
        None,
    )
    .unwrap();
    let zh = pruned.per_lang.iter().find(|l| l.language == "zh").unwrap();
    let en = pruned.per_lang.iter().find(|l| l.language == "en").unwrap();
    assert!(zh.ter.is_some());
    assert!(en.ter.is_none());
    assert!(en.excluded > 0);
    assert_eq!(pruned.per_lang.iter().map(|l| l.excluded).sum::<usize>(), pruned.excluded_utterances);
    // singleton keep-set: router can only pick zh
    assert_eq!(zh.router_accuracy, Some(1.0));

    // corpus dir round trip
    let corpus_dir = dir.path().join("corpus");
    cmd_gen_corpus(&cfg, &corpus_dir).unwrap();
    for sub in ["train", "test", "test_shifted", "lid_tune"] {
        assert!(corpus_dir.join(sub).join("manifest.tsv").exists());
        assert!(corpus_dir.join(sub).join("features.bin").exists());
    }
    let via_dir = cmd_eval(
        &outcome.checkpoint,
        &cfg,
        Some(&corpus_dir.join("test")),
        EvalSplit::Test,
        "all",
        RoutingMode::Argmax,
        None,
    )
    .unwrap();
    assert_eq!(via_dir.micro_ter, report.micro_ter, "dir-based corpus must match generated one");

    // unknown language in --prune-keep
    assert!(cmd_eval(
        &outcome.checkpoint,
        &cfg,
        None,
        EvalSplit::Test,
        "fr",
        RoutingMode::Argmax,
        None,
    )
    .is_err());
}

#[test]
fn finetune_command_freezes_backbone_and_reports_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let outcome = cmd_train(&cfg, &out).unwrap();
    let tuned_dir = dir.path().join("tuned");
    let tuned = cmd_finetune_router(&outcome.checkpoint, &cfg, &tuned_dir).unwrap();
    assert_eq!(tuned.frozen_hash.len(), 64);
    assert_eq!(tuned.records.len(), 2);
    assert!(tuned_dir.join("finetune.tsv").exists());

    let before = blrmoe::checkpoint::load(&outcome.checkpoint).unwrap();
    let after = blrmoe::checkpoint::load(&tuned.checkpoint).unwrap();
    let backbone = |n: &str| !blrmoe::model::weights::is_router_param(n);
    assert_eq!(before.hash_params(&backbone), after.hash_params(&backbone));
    assert_eq!(blrmoe::train::hex_string(&before.hash_params(&backbone)), tuned.frozen_hash);
}

#[test]
fn param_count_renders_breakdown() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let table = cmd_param_count(&cfg).unwrap();
    assert!(table.contains("frontend"));
    assert!(table.contains("mle_block"));
    assert!(table.contains("router"));
    assert!(table.contains("total"));
}
