//! `pnml`: reference generation, closure training, rollouts and evaluation.
//!
//! Exit codes: 0 on success, 2 for configuration or input errors, 3 for
//! numerical failures. Failures also print one JSON record on stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pn_closure::Error;
use serde_json::json;

use crate::config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "pnml", version, about = "PN transport with learned hyperbolic closures")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Sets a configuration key, e.g. `train.epochs=10`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Reference trajectories, snapshot selection and the training dataset.
    Generate,
    /// Train one closure network on the generated dataset.
    Train {
        /// Stop after 10 epochs.
        #[arg(long)]
        smoke: bool,
    },
    /// Train over the configured depth and width grid.
    Sweep {
        /// Stop each run after 10 epochs.
        #[arg(long)]
        smoke: bool,
    },
    /// Run the retained-order model from the configured initial condition.
    Rollout,
    /// Compare candidate runs against a reference run.
    Evaluate,
}

const SMOKE_EPOCHS: usize = 10;

fn run(cli: Cli) -> pn_closure::Result<()> {
    let overrides = Overrides {
        seed: cli.seed,
        out_dir: cli.out,
        entries: cli.overrides,
    };
    let mut cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Generate => commands::generate(&cfg),
        Command::Train { smoke } => {
            if smoke {
                cfg.train.epochs = SMOKE_EPOCHS;
            }
            commands::train(&cfg)
        }
        Command::Sweep { smoke } => {
            if smoke {
                cfg.train.epochs = SMOKE_EPOCHS;
            }
            commands::sweep(&cfg)
        }
        Command::Rollout => commands::rollout(&cfg).map(|_| ()),
        Command::Evaluate => commands::evaluate(&cfg),
    }
}

fn error_record(e: &Error) -> (u8, serde_json::Value) {
    let numerical = 3;
    let config = 2;
    let (code, kind, extra) = match e {
        Error::NonFinite { i, j, component } => {
            (numerical, "non_finite", json!({ "cell": [i, j], "component": component }))
        }
        Error::Diverged { epoch, last_finite } => {
            (numerical, "diverged", json!({ "epoch": epoch, "last_finite_epoch": last_finite }))
        }
        Error::NotSpd => (numerical, "not_spd", json!({})),
        Error::Config(_) => (config, "config", json!({})),
        Error::Format { path, .. } => (config, "format", json!({ "path": path })),
        Error::Io(_) => (config, "io", json!({})),
        Error::Json(_) => (config, "json", json!({})),
        _ => (config, "invalid_input", json!({})),
    };
    let mut record = json!({
        "status": "error",
        "kind": kind,
        "exit_code": code,
        "message": e.to_string(),
    });
    if let (Some(r), Some(x)) = (record.as_object_mut(), extra.as_object()) {
        r.extend(x.clone());
    }
    (code, record)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            e.print().ok();
            // clap reports usage errors with 2 and help/version with 0.
            return ExitCode::from(code as u8);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, record) = error_record(&e);
            eprintln!("{record}");
            ExitCode::from(code)
        }
    }
}
