//! `hydrarec`: ingest interaction logs, train and evaluate sequential
//! recommenders, and time the attention mechanisms.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use run::{CmdResult, Failure, RunDir};

#[derive(Parser)]
#[command(name = "hydrarec", version, about = "Hydra-attention sequential recommendation", after_help = config::key_help())]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML file with configuration keys (flat dotted keys or tables)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one key; repeatable, applied after --config
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Shorthand for --set seed=INT
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Parent directory for run directories
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Parse an interaction log, write a sequence cache and print dataset statistics
    Ingest,
    /// Train a model and evaluate it on held-out items
    Train,
    /// Evaluate a checkpoint (key `checkpoint`) on held-out items
    Evaluate,
    /// Recommend the next items for one or every user
    Predict,
    /// Time the attention mechanisms and fit scaling exponents
    Bench,
    /// Train over the cross product of two keys and tabulate the metrics
    Sweep,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Predict => "predict",
            Command::Bench => "bench",
            Command::Sweep => "sweep",
        }
    }

    fn needs_data(self) -> bool {
        !matches!(self, Command::Bench)
    }

    fn needs_checkpoint(self) -> bool {
        matches!(self, Command::Evaluate | Command::Predict)
    }
}

fn configure(cli: &Cli) -> CmdResult<RunConfig> {
    let mut sets = cli.sets.clone();
    if let Some(seed) = cli.seed {
        sets.push(format!("seed={seed}"));
    }
    let (cfg, mut problems) = RunConfig::load(cli.config.as_deref(), &sets);
    problems.extend(cfg.check());
    if cli.command.needs_data() && cfg.synthetic().is_none() && cfg.str("data.path").is_empty() {
        problems.push("`data.path` is empty and `data.synthetic` is none; there is nothing to read".into());
    }
    if cli.command.needs_checkpoint() && cfg.str("checkpoint").is_empty() {
        problems.push(format!("`{}` needs `checkpoint`", cli.command.name()));
    }
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(Failure::config(problems))
    }
}

fn execute(cli: &Cli) -> CmdResult<PathBuf> {
    let cfg = configure(cli)?;
    let run = RunDir::create(&cli.out, cli.command.name(), &cfg.hash())?;
    commands::write_config(&cfg, &run)?;
    match cli.command {
        Command::Ingest => commands::ingest(&cfg, &run)?,
        Command::Train => drop(commands::train(&cfg, &run)?),
        Command::Evaluate => drop(commands::evaluate_cmd(&cfg, &run)?),
        Command::Predict => commands::predict(&cfg, &run)?,
        Command::Bench => commands::bench(&cfg, &run)?,
        Command::Sweep => commands::sweep(&cfg, &run)?,
    }
    Ok(run.path)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(dir) => {
            println!("run directory: {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprint!("error: {f}");
            if !f.to_string().ends_with('\n') {
                eprintln!();
            }
            ExitCode::from(f.code as u8)
        }
    }
}
