use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nirvis_cli::commands::{cmd_cross_eval, cmd_embed, cmd_eval_verify, cmd_finetune, cmd_pretrain, cmd_synth_gen};
use nirvis_cli::tables::cmd_reproduce_tables;
use nirvis_cli::{ExperimentConfig, Overrides, Run};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "nirvis", version, about = "NIR-VIS face recognition transfer-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set finetune.lambda=0`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; runs land in `<out>/<name>/<config hash>/`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic source and target datasets.
    SynthGen,
    /// Pre-train on `data.source` (plus `data.target` when `pretrain.joint`).
    Pretrain,
    /// Fine-tune `data.checkpoint` on `data.target`.
    Finetune,
    /// Write embeddings of every `data.target` record.
    Embed,
    /// Verification and identification metrics on `data.target`.
    EvalVerify,
    /// TAR matrix of `cross.checkpoints` against `cross.datasets`.
    CrossEval,
    /// Run every table on synthetic data for each `reproduce.seeds` entry.
    ReproduceTables,
}

fn print<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let cfg = ExperimentConfig::resolve(&Overrides {
        file: cli.config,
        set: cli.set,
        seed: cli.seed,
        out: cli.out,
    })?;
    if cli.dry_run {
        cfg.validate()?;
        println!("# config_hash: {}\n{}", cfg.hash(), cfg.to_toml());
        return Ok(true);
    }
    let run = Run::new(cfg)?;
    log::info!("run directory {}", run.dir.display());
    match cli.command {
        Command::SynthGen => print(&cmd_synth_gen(&run)?)?,
        Command::Pretrain => print(&cmd_pretrain(&run)?)?,
        Command::Finetune => print(&cmd_finetune(&run)?)?,
        Command::Embed => print(&cmd_embed(&run)?)?,
        Command::EvalVerify => print(&cmd_eval_verify(&run)?)?,
        Command::CrossEval => print(&cmd_cross_eval(&run)?)?,
        Command::ReproduceTables => {
            let report = cmd_reproduce_tables(&run)?;
            for check in &report.checks {
                println!("{check}");
            }
            println!("tables written to {}", run.dir.display());
            return Ok(report.checks.iter().all(|c| c.passed));
        }
    }
    println!("artifacts in {}", run.dir.display());
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
