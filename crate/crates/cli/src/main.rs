//! Selective latent-iteration transformer pipeline: data generation,
//! reference training, oracle labeling, two-stage training, generation,
//! evaluation, and analysis.
//!
//! Exit codes: 0 success, 1 runtime/data error, 2 usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "tah",
    about = "Selective latent-iteration transformer: train, generate, analyze",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML run configuration; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for data, init, and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Maximum iteration depth override.
    #[arg(long, global = true)]
    max_depth: Option<usize>,

    /// Continuation threshold override for the decider.
    #[arg(long, global = true)]
    threshold: Option<f64>,

    /// Run directory (default: $TAH_RUN_ROOT/run or ./runs/run).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with answer keys.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        /// Task kind: mod-chain, copy-shift, brackets.
        #[arg(long)]
        task: Option<String>,
        /// Number of sequences.
        #[arg(long)]
        count: Option<usize>,
        /// Output corpus file (default <out>/corpus/corpus.txt).
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Train the depth-1 reference (standard) model.
    TrainRef {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Label a corpus with oracle iteration depths using a reference model.
    Label {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Stage 1: train a backbone under a policy.
    TrainBackbone {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// standard | always_think | oracle | token_plus_latent
        #[arg(long, default_value = "oracle")]
        policy: String,
        /// Resume from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage 2: train the iteration decider against a frozen backbone.
    TrainDecider {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Autoregressive generation from a prompt.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        prompt: String,
        /// standard | always_think | tah-decider | tah-oracle
        #[arg(long, default_value = "tah-decider")]
        policy: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        /// Reference checkpoint for the tah-oracle policy.
        #[arg(long)]
        ref_checkpoint: Option<PathBuf>,
        /// Write the generation trace (line-delimited JSON).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Teacher-forced evaluation of one policy on the validation split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// standard | always_think | tah-oracle | tah-decider
        #[arg(long, default_value = "tah-decider")]
        policy: String,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Overthinking, alternation, threshold-sweep and sensitivity analysis.
    Analyze {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Threshold sweep range, e.g. 0.5:0.99.
        #[arg(long)]
        threshold_sweep: Option<String>,
        /// Run the oracle noise-sensitivity sweep.
        #[arg(long, default_value_t = false)]
        sensitivity: bool,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Full run: gen-data, train-ref, label, train backbones, train decider,
    /// eval, analyze. Stages present in the manifest are skipped.
    Pipeline {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn default_out() -> PathBuf {
    let root = std::env::var("TAH_RUN_ROOT").unwrap_or_else(|_| "runs".to_string());
    PathBuf::from(root).join("run")
}

fn resolve_config(common: &CommonArgs) -> anyhow::Result<RunConfig> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(base.resolve(&Overrides {
        seed: common.seed,
        max_depth: common.max_depth,
        threshold: common.threshold,
    }))
}

fn usage_error(msg: String) -> ! {
    clap::Error::raw(clap::error::ErrorKind::InvalidValue, msg).exit()
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData {
            common,
            task,
            count,
            file,
        } => {
            let mut cfg = resolve_config(&common)?;
            if let Some(t) = task {
                cfg.task.spec.kind = match t.as_str() {
                    "mod-chain" => tah_core::data::TaskKind::ModChain,
                    "copy-shift" => tah_core::data::TaskKind::CopyShift,
                    "brackets" => tah_core::data::TaskKind::Brackets,
                    other => usage_error(format!(
                        "unknown task `{other}` (mod-chain, copy-shift, brackets)\n"
                    )),
                };
            }
            if let Some(c) = count {
                cfg.task.count = c;
            }
            let out = common.out.unwrap_or_else(default_out);
            let path = file.unwrap_or_else(|| out.join("corpus").join("corpus.txt"));
            commands::cmd_gen_data(&cfg, &path)
        }
        Command::TrainRef { common, corpus } => {
            let cfg = resolve_config(&common)?;
            let out = common.out.unwrap_or_else(default_out);
            commands::dispatch_precision(
                cfg.precision,
                || commands::cmd_train_ref::<f32>(&cfg, &corpus, &out),
                || commands::cmd_train_ref::<f64>(&cfg, &corpus, &out),
            )
        }
        Command::Label {
            common,
            corpus,
            checkpoint,
            file,
        } => {
            let cfg = resolve_config(&common)?;
            let out = common.out.unwrap_or_else(default_out);
            let path = file.unwrap_or_else(|| out.join("corpus").join("labels.jsonl"));
            commands::dispatch_precision(
                cfg.precision,
                || commands::cmd_label::<f32>(&cfg, &corpus, &checkpoint, &path),
                || commands::cmd_label::<f64>(&cfg, &corpus, &checkpoint, &path),
            )
        }
        Command::TrainBackbone {
            common,
            corpus,
            labels,
            policy,
            resume,
        } => {
            let cfg = resolve_config(&common)?;
            let out = common.out.unwrap_or_else(default_out);
            commands::dispatch_precision(
                cfg.precision,
                || {
                    commands::cmd_train_backbone::<f32>(
                        &cfg,
                        &corpus,
                        labels.as_deref(),
                        &policy,
                        &out,
                        resume.as_deref(),
                    )
                },
                || {
                    commands::cmd_train_backbone::<f64>(
                        &cfg,
                        &corpus,
                        labels.as_deref(),
                        &policy,
                        &out,
                        resume.as_deref(),
                    )
                },
            )
        }
        Command::TrainDecider {
            common,
            corpus,
            labels,
            checkpoint,
        } => {
            let cfg = resolve_config(&common)?;
            let out = common.out.unwrap_or_else(default_out);
            commands::dispatch_precision(
                cfg.precision,
                || commands::cmd_train_decider::<f32>(&cfg, &corpus, &labels, &checkpoint, &out),
                || commands::cmd_train_decider::<f64>(&cfg, &corpus, &labels, &checkpoint, &out),
            )
        }
        Command::Generate {
            common,
            checkpoint,
            corpus,
            prompt,
            policy,
            max_new,
            ref_checkpoint,
            trace,
        } => {
            let cfg = resolve_config(&common)?;
            commands::dispatch_precision(
                cfg.precision,
                || {
                    commands::cmd_generate::<f32>(
                        &cfg,
                        &checkpoint,
                        &prompt,
                        &policy,
                        max_new,
                        &corpus,
                        trace.as_deref(),
                        ref_checkpoint.as_deref(),
                    )
                },
                || {
                    commands::cmd_generate::<f64>(
                        &cfg,
                        &checkpoint,
                        &prompt,
                        &policy,
                        max_new,
                        &corpus,
                        trace.as_deref(),
                        ref_checkpoint.as_deref(),
                    )
                },
            )
        }
        Command::Eval {
            common,
            checkpoint,
            corpus,
            policy,
            report,
        } => {
            let cfg = resolve_config(&common)?;
            commands::dispatch_precision(
                cfg.precision,
                || {
                    commands::cmd_eval::<f32>(&cfg, &checkpoint, &corpus, &policy, report.as_deref())
                },
                || {
                    commands::cmd_eval::<f64>(&cfg, &checkpoint, &corpus, &policy, report.as_deref())
                },
            )
        }
        Command::Analyze {
            common,
            checkpoint,
            corpus,
            threshold_sweep,
            sensitivity,
            report,
        } => {
            let cfg = resolve_config(&common)?;
            let sweep = threshold_sweep.map(|s| parse_sweep(&s));
            commands::dispatch_precision(
                cfg.precision,
                || {
                    commands::cmd_analyze::<f32>(
                        &cfg,
                        &checkpoint,
                        &corpus,
                        sweep,
                        sensitivity,
                        report.as_deref(),
                    )
                },
                || {
                    commands::cmd_analyze::<f64>(
                        &cfg,
                        &checkpoint,
                        &corpus,
                        sweep,
                        sensitivity,
                        report.as_deref(),
                    )
                },
            )
        }
        Command::Pipeline { common } => {
            let cfg = resolve_config(&common)?;
            let out = common.out.unwrap_or_else(default_out);
            commands::dispatch_precision(
                cfg.precision,
                || commands::cmd_pipeline::<f32>(&cfg, &out),
                || commands::cmd_pipeline::<f64>(&cfg, &out),
            )
        }
    }
}

fn parse_sweep(s: &str) -> (f64, f64) {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 2 {
        usage_error(format!("--threshold-sweep expects LO:HI, got `{s}`\n"));
    }
    let (Ok(lo), Ok(hi)) = (parts[0].parse::<f64>(), parts[1].parse::<f64>()) else {
        usage_error(format!("--threshold-sweep expects numbers, got `{s}`\n"));
    };
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        usage_error(format!(
            "--threshold-sweep bounds must satisfy 0 <= LO <= HI <= 1, got `{s}`\n"
        ));
    }
    (lo, hi)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
