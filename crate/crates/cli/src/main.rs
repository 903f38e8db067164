use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rmc_core::config::ExperimentConfig;
use rmc_core::distill::Strategy;
use rmc_core::pipeline::{cmd_compress, cmd_datagen, cmd_eval, cmd_mitigate, cmd_sweep, cmd_train_teacher, RunContext};
use rmc_core::{Error, Result};
use serde_json::json;

/// Train, compress and debias a small transformer on a synthetic
/// shortcut task.
#[derive(Parser, Debug)]
#[command(name = "rmc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; defaults to the first seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Mitigation strategy: vanilla, distil, smooth, focal, jtt or rmc.
    #[arg(long)]
    strategy: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train, dev and adversarial splits.
    Datagen(Common),
    /// Fine-tune the uncompressed teacher.
    TrainTeacher(Common),
    /// Build difficulty snapshots and the plainly trained compressed student.
    Compress(Common),
    /// Train the compressed student with a mitigation strategy.
    Mitigate(Common),
    /// Evaluate checkpoints; all checkpoints of the run by default.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; may be repeated.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Train magnitude-pruned students across the sweep sparsities.
    Sweep(Common),
}

fn context(c: &Common) -> Result<(RunContext, Strategy)> {
    let config = match &c.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let strategy = match &c.strategy {
        Some(s) => s.parse()?,
        None => config.strategy,
    };
    let seed = c.seed.unwrap_or(config.seeds[0]);
    Ok((RunContext::new(config, seed, &c.out)?, strategy))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!(
        "{}",
        serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen(c) => {
            let (ctx, _) = context(&c)?;
            let paths: Vec<String> = cmd_datagen(&ctx)?.iter().map(|p| p.display().to_string()).collect();
            print_json(&json!({ "written": paths, "config_hash": ctx.config_hash() }))
        }
        Command::TrainTeacher(c) => {
            let (ctx, _) = context(&c)?;
            print_json(&cmd_train_teacher(&ctx)?)
        }
        Command::Compress(c) => {
            let (ctx, _) = context(&c)?;
            let (report, difficulty) = cmd_compress(&ctx)?;
            print_json(&json!({ "student": report, "difficulty": difficulty }))
        }
        Command::Mitigate(c) => {
            let (ctx, strategy) = context(&c)?;
            print_json(&cmd_mitigate(&ctx, strategy)?)
        }
        Command::Eval { common, checkpoints } => {
            let (ctx, _) = context(&common)?;
            print_json(&cmd_eval(&ctx, &checkpoints)?)
        }
        Command::Sweep(c) => {
            let (ctx, strategy) = context(&c)?;
            print_json(&cmd_sweep(&ctx, strategy)?)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut record = json!({ "error": e.kind(), "message": e.to_string() });
            if let Error::MissingArtifact(path) | Error::ConfigMismatch { path } = &e {
                record["path"] = json!(path.display().to_string());
            }
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
