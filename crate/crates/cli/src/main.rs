//! `tup`: ingest, profile, embed, train, eval and ablate runs from one JSON
//! config. Failures print a single `error[<category>]: <message>` line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tup_core::{Result, SynthConfig, TupError};

use crate::config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "tup", version, about = "Temporal user profiling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and split the dataset; writes split, stats and rejects.
    Ingest(Overrides),
    /// Generate short, long and general profiles for every user.
    Profile(Overrides),
    /// Embed items and profiles.
    Embed(Overrides),
    /// Train every configured variant and MF.
    Train(Overrides),
    /// Evaluate checkpoints and write the comparison report.
    Eval(Overrides),
    /// Run every stage and write the comparison report.
    Ablate(Overrides),
    /// Print the run config of a synthetic drift experiment.
    Synth(SynthArgs),
    /// Print dataset statistics.
    Stats(Overrides),
}

#[derive(Debug, clap::Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Write the dataset here as JSONL instead of inlining the generator settings.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    n_users: Option<usize>,
    #[arg(long)]
    n_items: Option<usize>,
    #[arg(long)]
    drift_strength: Option<f64>,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Output directory written into the printed config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn synth(args: &SynthArgs) -> Result<()> {
    let defaults = SynthConfig::default();
    let synth = SynthConfig {
        seed: args.seed,
        n_users: args.n_users.unwrap_or(defaults.n_users),
        n_items: args.n_items.unwrap_or(defaults.n_items),
        drift_strength: args.drift_strength.unwrap_or(defaults.drift_strength),
        ..defaults
    };
    let mut cfg = commands::synth_config(synth, args.dim, args.data.as_deref())?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    println!("{}", serde_json::to_string_pretty(&cfg)?);
    Ok(())
}

fn run(command: &Command) -> Result<()> {
    match command {
        Command::Synth(args) => synth(args),
        Command::Ingest(o) => commands::ingest(&o.resolve()?),
        Command::Profile(o) => commands::profile(&o.resolve()?),
        Command::Embed(o) => commands::embed(&o.resolve()?),
        Command::Train(o) => commands::train(&o.resolve()?),
        Command::Eval(o) => commands::eval(&o.resolve()?),
        Command::Ablate(o) => commands::ablate(&o.resolve()?),
        Command::Stats(o) => commands::stats(&o.resolve()?),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn exit_code(e: &TupError) -> u8 {
    match e {
        TupError::Config(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), one_line(&e.to_string()));
            ExitCode::from(exit_code(&e))
        }
    }
}
