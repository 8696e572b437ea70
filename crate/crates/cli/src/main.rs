use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use prunekv_cli::commands::{cmd_bench, cmd_eval_chair, cmd_genmodel, cmd_replay, cmd_run};
use prunekv_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(
    name = "prunekv",
    version,
    about = "Attention-guided visual KV-cache pruning on a toy decoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set policy.r=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set policy.preset=NAME`.
    #[arg(long)]
    preset: Option<String>,
    /// Shorthand for `--set policy.policy=KIND`.
    #[arg(long)]
    policy: Option<String>,
    /// Shorthand for `--set model.path=PATH`.
    #[arg(long)]
    model: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut overrides = self.overrides.clone();
        if let Some(p) = &self.preset {
            overrides.push(format!("policy.preset=\"{p}\""));
        }
        if let Some(p) = &self.policy {
            overrides.push(format!("policy.policy=\"{p}\""));
        }
        if let Some(m) = &self.model {
            overrides.push(format!(
                "model.path={}",
                toml_string(&m.display().to_string())
            ));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

#[derive(Subcommand)]
enum Command {
    /// Generate seeded synthetic weights and write them as a weight file.
    Genmodel {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Decode with the configured policy and write tokens, trace, CSV, FLOPs.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (overrides `output.dir`).
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Re-run the trigger logic over a recorded trace.
    Replay {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        trace: PathBuf,
        /// Exit with the contract-violation code if the replay diverges.
        #[arg(long)]
        strict: bool,
    },
    /// Score captions for object hallucination.
    EvalChair {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Compare per-token latency and FLOPs against no pruning.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short, default_value_t = 5)]
        repetitions: usize,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn print<T: Serialize>(value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Core {
        context: "printing report".into(),
        source: e.into(),
    })?;
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn with_out(mut cfg: RunConfig, out: Option<PathBuf>) -> RunConfig {
    if let Some(dir) = out {
        cfg.output.dir = dir;
    }
    cfg
}

fn main_inner(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Genmodel { cfg, out } => print(&cmd_genmodel(&cfg.load()?, &out)?),
        Command::Run { cfg, out } => print(&cmd_run(&with_out(cfg.load()?, out))?),
        Command::Replay { cfg, trace, strict } => {
            let report = cmd_replay(&trace, &cfg.load()?)?;
            print(&report)?;
            match (&report.divergence, strict) {
                (Some(d), true) => Err(CliError::Core {
                    context: "replay".into(),
                    source: prunekv_core::Error::Contract(format!(
                        "diverged at step {} on {}",
                        d.step, d.field
                    )),
                }),
                _ => Ok(()),
            }
        }
        Command::EvalChair {
            captions,
            annotations,
        } => print(&cmd_eval_chair(&captions, &annotations)?),
        Command::Bench {
            cfg,
            repetitions,
            out,
        } => print(&cmd_bench(&with_out(cfg.load()?, out), repetitions)?),
    }
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
