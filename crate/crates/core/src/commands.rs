//! Experiment commands behind the CLI: train, evaluate (with pruning),
//! router fine-tuning, parameter accounting, corpus generation, the
//! verification suite, and the ablation grids.
//!
//! Every run is a pure function of (config, seeds): run directories get
//! the fully-resolved config written next to the outputs, logs carry no
//! timestamps, and rerunning a command reproduces its files byte for byte.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::experiment::{ExperimentConfig, Resolved};
use crate::metrics::MetricsReport;
use crate::model::{param_breakdown, param_count, CountMode, EncoderWeights};
use crate::router::{ExpertMask, RoutingMode};
use crate::synth;
use crate::train::{self, finetune_router, EpochRecord};
use crate::verify::{self, Fault};

pub const RESOLVED_CONFIG_FILE: &str = "resolved.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.blrm";
pub const METRICS_FILE: &str = "metrics.tsv";

fn write_resolved(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(RESOLVED_CONFIG_FILE), cfg.to_toml())?;
    Ok(())
}

fn metrics_header(languages: &[String]) -> String {
    let mut h = String::from("epoch\ttrain_total\ttrain_ctc\ttrain_lid");
    for l in languages {
        let _ = write!(h, "\tter_{l}");
    }
    h.push_str("\tter_micro\tter_macro\trouter_acc");
    h
}

fn metrics_line(rec: &EpochRecord, languages: &[String]) -> String {
    let mut line = format!(
        "{}\t{:.6}\t{:.6}\t{:.6}",
        rec.epoch, rec.train.total, rec.train.ctc, rec.train.lid
    );
    match &rec.heldout {
        Some(rep) => {
            for l in languages {
                let ter = rep
                    .per_lang
                    .iter()
                    .find(|p| &p.language == l)
                    .and_then(|p| p.ter);
                match ter {
                    Some(t) => {
                        let _ = write!(line, "\t{t:.6}");
                    }
                    None => line.push_str("\t-"),
                }
            }
            let _ = write!(line, "\t{:.6}\t{:.6}", rep.micro_ter, rep.macro_ter);
            match rep.router_accuracy {
                Some(a) => {
                    let _ = write!(line, "\t{a:.6}");
                }
                None => line.push_str("\t-"),
            }
        }
        None => {
            for _ in 0..languages.len() + 3 {
                line.push_str("\t-");
            }
        }
    }
    line
}

pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub report_test: MetricsReport,
    pub report_shifted: MetricsReport,
}

/// Deterministic end-to-end training run: corpus → weights → epochs →
/// checkpoint plus metrics log plus final in-domain/shifted reports.
pub fn cmd_train(config_path: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    let cfg = ExperimentConfig::load(config_path)?;
    let resolved = Resolved::new(&cfg)?;
    write_resolved(&resolved.config, out_dir)?;
    let corpora = resolved.build_corpora()?;
    let mut weights = EncoderWeights::init(resolved.model.clone(), cfg.train.seed)?;

    let metrics_path = out_dir.join(METRICS_FILE);
    let mut log = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    writeln!(log, "{}", metrics_header(&corpora.train.languages))?;
    let langs = corpora.train.languages.clone();
    train::train(&mut weights, &corpora.train, Some(&corpora.test), &cfg.train, |rec| {
        let _ = writeln!(log, "{}", metrics_line(rec, &langs));
    })?;
    log.flush()?;
    drop(log);

    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    checkpoint::save(&weights, &ckpt_path)?;

    let mask = ExpertMask::full(weights.config.num_experts());
    let report_test = train::evaluate(&weights, &corpora.test, &mask, RoutingMode::Argmax)?;
    let report_shifted =
        train::evaluate(&weights, &corpora.test_shifted, &mask, RoutingMode::Argmax)?;
    std::fs::write(
        out_dir.join("eval_test.json"),
        serde_json::to_string_pretty(&report_test).expect("report serializes"),
    )?;
    std::fs::write(
        out_dir.join("eval_test_shifted.json"),
        serde_json::to_string_pretty(&report_shifted).expect("report serializes"),
    )?;
    Ok(TrainOutcome {
        out_dir: out_dir.to_path_buf(),
        checkpoint: ckpt_path,
        metrics_log: metrics_path,
        report_test,
        report_shifted,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Test,
    TestShifted,
}

impl EvalSplit {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(EvalSplit::Train),
            "test" => Ok(EvalSplit::Test),
            "test-shifted" => Ok(EvalSplit::TestShifted),
            other => Err(Error::config(format!(
                "unknown split '{other}' (expected train|test|test-shifted)"
            ))),
        }
    }
}

/// `--prune-keep` argument: "all" or a comma-separated language list.
pub fn parse_keep_mask(spec: &str, languages: &[String]) -> Result<ExpertMask> {
    if spec == "all" {
        return ExpertMask::from_active(vec![true; languages.len()]);
    }
    let mut active = vec![false; languages.len()];
    for name in spec.split(',') {
        let name = name.trim();
        let idx = languages
            .iter()
            .position(|l| l == name)
            .ok_or_else(|| Error::config(format!("unknown language '{name}' (model has {languages:?})")))?;
        active[idx] = true;
    }
    ExpertMask::from_active(active)
}

/// Evaluate a checkpoint under a pruning mask. The corpus comes from the
/// config (any of the three splits) or from a corpus directory written by
/// `gen-corpus`.
pub fn cmd_eval(
    checkpoint_path: &Path,
    config_path: &Path,
    corpus_dir: Option<&Path>,
    split: EvalSplit,
    prune_keep: &str,
    routing: RoutingMode,
    out: Option<&Path>,
) -> Result<MetricsReport> {
    let weights = checkpoint::load(checkpoint_path)?;
    let ds = match corpus_dir {
        Some(dir) => synth::read_dir(dir)?,
        None => {
            let cfg = ExperimentConfig::load(config_path)?;
            let resolved = Resolved::new(&cfg)?;
            let corpora = resolved.build_corpora()?;
            match split {
                EvalSplit::Train => corpora.train,
                EvalSplit::Test => corpora.test,
                EvalSplit::TestShifted => corpora.test_shifted,
            }
        }
    };
    if ds.languages != weights.config.languages {
        return Err(Error::config(format!(
            "corpus languages {:?} do not match model languages {:?}",
            ds.languages, weights.config.languages
        )));
    }
    let mask = parse_keep_mask(prune_keep, &weights.config.languages)?;
    let report = train::evaluate(&weights, &ds, &mask, routing)?;
    if let Some(path) = out {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, serde_json::to_string_pretty(&report).expect("report serializes"))?;
    }
    Ok(report)
}

pub struct FinetuneOutcome {
    pub checkpoint: PathBuf,
    pub frozen_hash: String,
    pub records: Vec<train::FinetuneRecord>,
}

/// Router-only adaptation on shifted-domain audio-language pairs; the
/// backbone hash is verified unchanged and reported.
pub fn cmd_finetune_router(
    checkpoint_path: &Path,
    config_path: &Path,
    out_dir: &Path,
) -> Result<FinetuneOutcome> {
    let cfg = ExperimentConfig::load(config_path)?;
    let resolved = Resolved::new(&cfg)?;
    write_resolved(&resolved.config, out_dir)?;
    let mut weights = checkpoint::load(checkpoint_path)?;
    if weights.config.languages != resolved.model.languages {
        return Err(Error::config(format!(
            "checkpoint languages {:?} do not match config languages {:?}",
            weights.config.languages, resolved.model.languages
        )));
    }
    let pairs = resolved.build_lid_pairs()?;
    let report = finetune_router(&mut weights, &pairs, &cfg.lid_tune.to_finetune_config())?;

    let mut log = String::from("epoch\tlid_loss\ttune_accuracy\n");
    for r in &report.records {
        let _ = writeln!(log, "{}\t{:.6}\t{:.6}", r.epoch, r.lid_loss, r.tune_accuracy);
    }
    std::fs::write(out_dir.join("finetune.tsv"), log)?;

    let ckpt = out_dir.join(CHECKPOINT_FILE);
    checkpoint::save(&weights, &ckpt)?;
    Ok(FinetuneOutcome { checkpoint: ckpt, frozen_hash: report.frozen_hash, records: report.records })
}

/// Train/infer parameter counts with a per-component breakdown.
pub fn cmd_param_count(config_path: &Path) -> Result<String> {
    let cfg = ExperimentConfig::load(config_path)?;
    let model = cfg.model_config()?;
    let train_b = param_breakdown(&model, CountMode::Train);
    let infer_b = param_breakdown(&model, CountMode::Infer);
    let m = |v: u64| v as f64 / 1e6;
    let mut out = String::new();
    let moe: Vec<String> = model.moe_modules.iter().map(|x| x.to_string()).collect();
    let _ = writeln!(
        out,
        "model: L={} N={} d={} heads={} ffn={} experts={} moe=[{}] router={:?}",
        model.num_layers,
        model.num_shared,
        model.d_model,
        model.num_heads,
        model.d_ffn,
        model.num_experts(),
        moe.join(","),
        model.router,
    );
    let _ = writeln!(out, "{:<14} {:>14} {:>14}", "component", "train", "infer");
    for (name, t, i) in [
        ("frontend", train_b.frontend, infer_b.frontend),
        ("shared_block", train_b.shared_block, infer_b.shared_block),
        ("mle_block", train_b.mle_block, infer_b.mle_block),
        ("final_norm", train_b.final_norm, infer_b.final_norm),
        ("output_head", train_b.output_head, infer_b.output_head),
        ("router", train_b.router, infer_b.router),
    ] {
        let _ = writeln!(out, "{name:<14} {t:>14} {i:>14}");
    }
    let _ = writeln!(out, "{:<14} {:>14} {:>14}", "total", train_b.total, infer_b.total);
    let _ = writeln!(
        out,
        "total (M)      {:>14.3} {:>14.3}",
        m(param_count(&model, CountMode::Train)),
        m(param_count(&model, CountMode::Infer))
    );
    Ok(out)
}

/// Run the verification suite; `Ok(false)` means at least one check failed.
pub fn cmd_verify(seeds: u64, fault: Option<Fault>) -> Result<(String, bool)> {
    let results = verify::run_all(seeds, fault)?;
    let all_passed = results.iter().all(|r| r.passed);
    Ok((verify::render(&results), all_passed))
}

/// Materialize the four corpora of a config as documented on-disk
/// fixtures: train/, test/, test_shifted/, lid_tune/.
pub fn cmd_gen_corpus(config_path: &Path, out_dir: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let resolved = Resolved::new(&cfg)?;
    write_resolved(&resolved.config, out_dir)?;
    let corpora = resolved.build_corpora()?;
    synth::write_dir(&corpora.train, &out_dir.join("train"))?;
    synth::write_dir(&corpora.test, &out_dir.join("test"))?;
    synth::write_dir(&corpora.test_shifted, &out_dir.join("test_shifted"))?;
    synth::write_dir(&resolved.build_lid_pairs()?, &out_dir.join("lid_tune"))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationGrid {
    /// Which attention/FFN modules carry experts.
    Modules,
    /// Progressively pruned expert sets on the shifted test.
    Pruning,
}

impl AblationGrid {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "modules" => Ok(AblationGrid::Modules),
            "pruning" => Ok(AblationGrid::Pruning),
            other => Err(Error::config(format!("unknown grid '{other}' (expected modules|pruning)"))),
        }
    }
}

fn fmt_pct(x: Option<f64>) -> String {
    x.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

/// Rerun the module grid ({f}, {o}, {o,f}, {o,v,f}, {v,k,q,f},
/// {o,v,k,q,f}) plus the vanilla baseline on the config's corpus and emit
/// a side-by-side table over the in-domain and shifted test sets.
pub fn cmd_ablation_modules(config_path: &Path, out_dir: &Path) -> Result<String> {
    let base = ExperimentConfig::load(config_path)?;
    std::fs::create_dir_all(out_dir)?;
    let grid: [(&str, Vec<&str>); 7] = [
        ("vanilla", vec![]),
        ("f", vec!["f"]),
        ("o", vec!["o"]),
        ("o,f", vec!["o", "f"]),
        ("o,v,f", vec!["o", "v", "f"]),
        ("v,k,q,f", vec!["v", "k", "q", "f"]),
        ("o,v,k,q,f", vec!["o", "v", "k", "q", "f"]),
    ];
    let mut rows = Vec::new();
    for (id, (label, moe)) in grid.iter().enumerate() {
        let mut cfg = base.clone();
        cfg.model.moe_modules = moe.iter().map(|s| s.to_string()).collect();
        if moe.is_empty() {
            // vanilla: no routing and no LID objective
            cfg.train.lambda_lid = 0.0;
        }
        let resolved = Resolved::new(&cfg)?;
        let corpora = resolved.build_corpora()?;
        let mut weights = EncoderWeights::init(resolved.model.clone(), cfg.train.seed)?;
        train::train(&mut weights, &corpora.train, None, &cfg.train, |_| {})?;
        let mask = ExpertMask::full(weights.config.num_experts());
        let in_rep = train::evaluate(&weights, &corpora.test, &mask, RoutingMode::Argmax)?;
        let sh_rep = train::evaluate(&weights, &corpora.test_shifted, &mask, RoutingMode::Argmax)?;
        let ckpt_dir = out_dir.join(format!("id{id}_{}", label.replace(',', "")));
        std::fs::create_dir_all(&ckpt_dir)?;
        checkpoint::save(&weights, &ckpt_dir.join(CHECKPOINT_FILE))?;
        rows.push((
            id,
            label.to_string(),
            param_count(&resolved.model, CountMode::Train),
            param_count(&resolved.model, CountMode::Infer),
            in_rep,
            sh_rep,
        ));
    }
    let mut table = format!(
        "{:<3} {:<10} {:>12} {:>12} {:>9} {:>9} {:>10} {:>10}\n",
        "id", "moe", "train_par", "infer_par", "in_TER%", "sh_TER%", "in_acc%", "sh_acc%"
    );
    for (id, label, tp, ip, in_rep, sh_rep) in &rows {
        let _ = writeln!(
            table,
            "{:<3} {:<10} {:>12} {:>12} {:>9.2} {:>9.2} {:>10} {:>10}",
            id,
            label,
            tp,
            ip,
            100.0 * in_rep.micro_ter,
            100.0 * sh_rep.micro_ter,
            fmt_pct(in_rep.router_accuracy),
            fmt_pct(sh_rep.router_accuracy),
        );
    }
    std::fs::write(out_dir.join("ablation_modules.txt"), &table)?;
    let json: Vec<_> = rows
        .iter()
        .map(|(id, label, tp, ip, in_rep, sh_rep)| {
            serde_json::json!({
                "id": id,
                "moe_modules": label,
                "train_params": tp,
                "infer_params": ip,
                "in_domain": in_rep,
                "shifted": sh_rep,
            })
        })
        .collect();
    std::fs::write(
        out_dir.join("ablation_modules.json"),
        serde_json::to_string_pretty(&json).expect("rows serialize"),
    )?;
    Ok(table)
}

/// Evaluate one trained checkpoint on the shifted test under a grid of
/// keep-sets; pruned languages are excluded and shown as dashes.
pub fn cmd_ablation_pruning(
    config_path: &Path,
    checkpoint_path: &Path,
    out_dir: &Path,
) -> Result<String> {
    let cfg = ExperimentConfig::load(config_path)?;
    let resolved = Resolved::new(&cfg)?;
    std::fs::create_dir_all(out_dir)?;
    let weights = checkpoint::load(checkpoint_path)?;
    let corpora = resolved.build_corpora()?;
    let langs = weights.config.languages.clone();
    let n = langs.len();

    let mut keeps: Vec<(String, Vec<usize>)> = vec![("all".into(), (0..n).collect())];
    for drop in 0..n {
        let kept: Vec<usize> = (0..n).filter(|&i| i != drop).collect();
        keeps.push((format!("-{}", langs[drop]), kept));
    }
    if n >= 3 {
        keeps.push((format!("-{},{}", langs[0], langs[1]), (0..n).filter(|&i| i > 1).collect()));
    }
    if n >= 4 {
        keeps.push((
            format!("-{},{},{}", langs[0], langs[1], langs[2]),
            (0..n).filter(|&i| i > 2).collect(),
        ));
    }

    let mut table = format!("{:<16}", "pruned");
    for l in &langs {
        let _ = write!(table, " {:>8}", format!("{l}_TER%"));
    }
    table.push_str("   router%\n");
    let mut json_rows = Vec::new();
    for (label, kept) in &keeps {
        let mask = ExpertMask::keep(n, kept)?;
        let rep = train::evaluate(&weights, &corpora.test_shifted, &mask, RoutingMode::Argmax)?;
        let _ = write!(table, "{label:<16}");
        for l in &langs {
            let ter = rep.per_lang.iter().find(|p| &p.language == l).and_then(|p| p.ter);
            let _ = write!(table, " {:>8}", fmt_pct(ter));
        }
        let _ = writeln!(table, "  {:>8}", fmt_pct(rep.router_accuracy));
        json_rows.push(serde_json::json!({ "pruned": label, "report": rep }));
    }
    std::fs::write(out_dir.join("ablation_pruning.txt"), &table)?;
    std::fs::write(
        out_dir.join("ablation_pruning.json"),
        serde_json::to_string_pretty(&json_rows).expect("rows serialize"),
    )?;
    Ok(table)
}

/// Map command errors to process exit codes: 1 validation, 2 divergence
/// or failed checks.
pub fn exit_code_for(e: &Error) -> i32 {
    e.exit_code()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_mask_parses_names() {
        let langs: Vec<String> = ["zh", "en", "ja", "ar"].iter().map(|s| s.to_string()).collect();
        let m = parse_keep_mask("zh,ar", &langs).unwrap();
        assert!(m.is_active(0) && m.is_active(3));
        assert!(!m.is_active(1) && !m.is_active(2));
        assert_eq!(parse_keep_mask("all", &langs).unwrap().num_active(), 4);
        assert!(parse_keep_mask("fr", &langs).is_err());
    }

    #[test]
    fn split_names_parse() {
        assert_eq!(EvalSplit::parse("test").unwrap(), EvalSplit::Test);
        assert_eq!(EvalSplit::parse("test-shifted").unwrap(), EvalSplit::TestShifted);
        assert!(EvalSplit::parse("dev").is_err());
    }
}
