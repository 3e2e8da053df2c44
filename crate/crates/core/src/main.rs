use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use local_error::cli::{cmd_cost, cmd_eval, cmd_gradcheck, cmd_train, resolve_out};
use local_error::config::RunConfig;
use local_error::{Error, Result};

#[derive(Parser)]
#[command(name = "local-error", version, about = "Train deep networks from local errors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and write metrics plus a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: `out.dir` or runs/<rule>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Accepted for compatibility; every run is deterministic.
        #[arg(long)]
        deterministic: bool,
    },
    /// Evaluate a checkpoint on its test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// 1-based layer whose classifier makes the prediction.
        #[arg(long)]
        exit_layer: Option<usize>,
        /// Take dataset paths from this config instead of the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print analytic memory-traffic and MAC counts.
    Cost {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every update rule on the config's network.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
}

fn emit(text: &str, out: Option<PathBuf>) -> Result<()> {
    match out {
        Some(p) => Ok(std::fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, out, .. } => {
            let cfg = RunConfig::load(&config)?;
            let dir = resolve_out(&cfg, out.as_deref());
            cmd_train(&cfg, &dir, &mut io::stderr())?;
        }
        Command::Eval {
            checkpoint,
            exit_layer,
            config,
            out,
        } => {
            let cfg = config.map(|c| RunConfig::load(&c)).transpose()?;
            let r = cmd_eval(&checkpoint, exit_layer, cfg.as_ref())?;
            emit(&r.to_csv(), out)?;
        }
        Command::Cost { config, out } => emit(&cmd_cost(&RunConfig::load(&config)?)?, out)?,
        Command::Gradcheck { config } => {
            let (text, ok) = cmd_gradcheck(&RunConfig::load(&config)?)?;
            print!("{text}");
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(Error::exit_code(&e) as u8)
        }
    }
}
