use std::path::PathBuf;
use std::process::ExitCode;

use bitbudget::commands;
use bitbudget::{CliError, RunConfig};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bitbudget", version, about = "Budget-constrained mixed-precision bit allocation")]
struct Cli {
    /// Flat `key = value` config file; `preset = controlled` selects the controlled-sensitivity setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Target average bits; `allocate` and `compare` accept a comma-separated list.
    #[arg(long, global = true, value_delimiter = ',')]
    budget: Vec<f64>,
    #[arg(long, global = true)]
    mode: Option<Mode>,
    #[arg(long, global = true)]
    solver: Option<Solver>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any config key, e.g. `--set steps=100`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Al,
    Mult,
    Ce,
}

#[derive(Clone, Copy, ValueEnum)]
enum Solver {
    Auto,
    Dp,
    Bnb,
    Brute,
}

#[derive(Subcommand)]
enum Command {
    /// Build the teacher model and candidate pool; print quantization errors.
    Build,
    /// Run Stage I and write soft scores plus the training log.
    Learn,
    /// Solve Stage II on stored scores at one or more budgets.
    Allocate,
    /// Compare uniform, learned, trace-based and ablation allocations on holdout data.
    Compare,
    /// Re-verify every artifact in the output directory.
    Validate,
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("`--set {o}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim()).map_err(CliError::Config)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = cli.mode {
        let tag = match m {
            Mode::Al => "al",
            Mode::Mult => "mult",
            Mode::Ce => "ce",
        };
        cfg.set("mode", tag).map_err(CliError::Config)?;
    }
    if let Some(s) = cli.solver {
        let name = match s {
            Solver::Auto => "auto",
            Solver::Dp => "dp",
            Solver::Bnb => "bnb",
            Solver::Brute => "brute",
        };
        cfg.set("solver", name).map_err(CliError::Config)?;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(&b) = cli.budget.first() {
        cfg.b_target = b;
        cfg.budgets = cli.budget.clone();
        cfg.compare_budgets = cli.budget.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = resolve(cli)?;
    match cli.command {
        Command::Build => commands::cmd_build(&cfg),
        Command::Learn => commands::cmd_learn(&cfg),
        Command::Allocate => commands::cmd_allocate(&cfg, &cfg.budgets),
        Command::Compare => commands::cmd_compare(&cfg),
        Command::Validate => commands::cmd_validate(&cfg.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
