//! `dds`: train, check and generate data from a TOML run config.
//!
//! Exit codes: 0 on success, 2 on a configuration error, 1 on a numerical or
//! output failure (including a failed gradient check).

mod config;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(dds_core::Error),
    CheckFailed(String),
}

impl From<dds_core::Error> for CliError {
    fn from(e: dds_core::Error) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e)
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(e) => write!(f, "runtime error: {e}"),
            CliError::CheckFailed(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) | CliError::CheckFailed(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dds",
    version,
    about = "Data selection by dev-gradient alignment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train with the configured engine.
    Train(Common),
    /// Check the scorer gradient and Taylor rewards against finite differences.
    Gradcheck(Common),
    /// Brute-force the best example weights of a tiny problem.
    Oracle(Common),
    /// Write the configured dataset as CSV.
    GenData(Common),
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn prepare(c: &Common) -> Result<config::LoadedConfig, CliError> {
    let loaded = config::load(&c.config, c.seed)?;
    create_dir(&c.out)?;
    Ok(loaded)
}

fn create_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| {
        CliError::Config(format!(
            "cannot create output directory {}: {e}",
            out.display()
        ))
    })
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(c) => {
            let loaded = prepare(&c)?;
            let s = run::train(&loaded, &c.out)?;
            println!(
                "{} finished: dev accuracy {:.4} after {} steps",
                s.engine, s.final_dev_acc, s.steps
            );
        }
        Command::Gradcheck(c) => {
            let loaded = prepare(&c)?;
            let r = run::gradcheck(&loaded, &c.out)?;
            let worst = r
                .hypergradient
                .iter()
                .map(|c| c.report.max_rel_error)
                .fold(0.0, f64::max);
            println!("gradcheck pass={} max rel error {worst:.2e}", r.pass);
            if !r.pass {
                return Err(CliError::CheckFailed(format!(
                    "see {}",
                    c.out.join("report.json").display()
                )));
            }
        }
        Command::Oracle(c) => {
            let loaded = prepare(&c)?;
            let r = run::oracle(&loaded, &c.out)?;
            println!(
                "oracle best weights {:?} dev loss {:.6}",
                r.best_weights, r.best_dev_loss
            );
        }
        Command::GenData(c) => {
            let loaded = prepare(&c)?;
            let s = run::gen_data(&loaded, &c.out)?;
            println!(
                "wrote {} train and {} dev examples to {}",
                s.train_examples,
                s.dev_examples,
                c.out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("DDS_LOG_LEVEL", "error"))
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
