//! Experiment CLI: training, evaluation with expert pruning, router
//! fine-tuning, parameter accounting, corpus fixtures, the verification
//! suite, and the ablation grids.
//!
//! Exit codes: 0 success, 1 validation/config error, 2 divergence or a
//! failed verification check.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use blrmoe::commands::{self, AblationGrid, EvalSplit};
use blrmoe::router::RoutingMode;
use blrmoe::verify::Fault;

#[derive(Parser)]
#[command(name = "blrmoe", version, about = "Language-routed mixture-of-experts CTC encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory for checkpoint, metrics log, and resolved config.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint, optionally with expert pruning.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Corpus directory written by gen-corpus; defaults to regenerating
        /// the configured split.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Which configured split to evaluate: train | test | test-shifted.
        #[arg(long, default_value = "test")]
        split: String,
        /// "all" or a comma-separated list of languages to keep, e.g. "zh,en".
        #[arg(long = "prune-keep", default_value = "all")]
        prune_keep: String,
        /// argmax | teacher
        #[arg(long, default_value = "argmax")]
        routing: String,
        /// Write the machine-readable report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune the LID router on shifted-domain audio-language pairs,
    /// freezing everything else.
    FinetuneRouter {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic train/infer parameter counts for a config.
    ParamCount {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the verification suite (gradient checks, CTC oracle,
    /// equivalence and routing invariants).
    Verify {
        /// Random draws per gradient check.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Inject a known fault to prove the checks can fail.
        #[arg(long)]
        fault: Option<String>,
    },
    /// Write the configured corpora to disk as documented fixtures.
    GenCorpus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rerun an ablation grid: modules (train the MoE-module grid) or
    /// pruning (keep-set grid on one checkpoint).
    Ablation {
        #[arg(long)]
        config: PathBuf,
        /// modules | pruning
        #[arg(long)]
        grid: String,
        /// Required for the pruning grid.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_routing(s: &str) -> Result<RoutingMode, blrmoe::Error> {
    match s {
        "argmax" => Ok(RoutingMode::Argmax),
        "teacher" => Ok(RoutingMode::Teacher),
        other => Err(blrmoe::Error::Config(format!(
            "unknown routing '{other}' (expected argmax|teacher)"
        ))),
    }
}

fn run(cli: Cli) -> Result<i32, blrmoe::Error> {
    match cli.command {
        Command::Train { config, out } => {
            let outcome = commands::cmd_train(&config, &out)?;
            println!("run directory: {}", outcome.out_dir.display());
            println!("checkpoint:    {}", outcome.checkpoint.display());
            println!("metrics log:   {}", outcome.metrics_log.display());
            println!("\nin-domain test:\n{}", outcome.report_test.render_table());
            println!("shifted test:\n{}", outcome.report_shifted.render_table());
            Ok(0)
        }
        Command::Eval { checkpoint, config, corpus, split, prune_keep, routing, out } => {
            let report = commands::cmd_eval(
                &checkpoint,
                &config,
                corpus.as_deref(),
                EvalSplit::parse(&split)?,
                &prune_keep,
                parse_routing(&routing)?,
                out.as_deref(),
            )?;
            println!("{}", report.render_table());
            Ok(0)
        }
        Command::FinetuneRouter { checkpoint, config, out } => {
            let outcome = commands::cmd_finetune_router(&checkpoint, &config, &out)?;
            println!("tuned checkpoint: {}", outcome.checkpoint.display());
            println!("frozen backbone sha256: {}", outcome.frozen_hash);
            if let Some(last) = outcome.records.last() {
                println!(
                    "final tune epoch {}: lid_loss {:.4}, accuracy {:.2}%",
                    last.epoch,
                    last.lid_loss,
                    100.0 * last.tune_accuracy
                );
            }
            Ok(0)
        }
        Command::ParamCount { config } => {
            print!("{}", commands::cmd_param_count(&config)?);
            Ok(0)
        }
        Command::Verify { seeds, fault } => {
            let fault = match fault.as_deref() {
                None => None,
                Some("flip-matmul-grad") => Some(Fault::FlipMatmulGrad),
                Some(other) => {
                    return Err(blrmoe::Error::Config(format!("unknown fault '{other}'")))
                }
            };
            let (summary, all_passed) = commands::cmd_verify(seeds, fault)?;
            print!("{summary}");
            Ok(if all_passed { 0 } else { 2 })
        }
        Command::GenCorpus { config, out } => {
            commands::cmd_gen_corpus(&config, &out)?;
            println!("corpus written to {}", out.display());
            Ok(0)
        }
        Command::Ablation { config, grid, checkpoint, out } => {
            let table = match AblationGrid::parse(&grid)? {
                AblationGrid::Modules => commands::cmd_ablation_modules(&config, &out)?,
                AblationGrid::Pruning => {
                    let ckpt = checkpoint.ok_or_else(|| {
                        blrmoe::Error::Config("--checkpoint is required for the pruning grid".into())
                    })?;
                    commands::cmd_ablation_pruning(&config, &ckpt, &out)?
                }
            };
            print!("{table}");
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
