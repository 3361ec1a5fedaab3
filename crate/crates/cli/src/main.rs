use std::process::ExitCode;

use bsvie_cli::{init_threads, run, CliError, ExperimentConfig, Overrides, Suite};
use clap::{Parser, Subcommand};

/// Type-II BSVIE experiments: solves, convergence studies and checks.
#[derive(Debug, Parser)]
#[command(name = "bsvie", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve on each level and report per-cell moments and a priori norms.
    Solve(Overrides),
    /// Error functional against the closed form on each level, with the fitted slope.
    Converge(Overrides),
    /// BSDE-system approximation error on each level.
    BsdeApprox(Overrides),
    /// Regularity moduli of the closed form on each level.
    Moduli(Overrides),
    /// Randomized checks of the Gronwall inequalities.
    Gronwall(Overrides),
    /// Tree solver against the brute-force and closed-form oracles.
    OracleDiff(Overrides),
    /// Run the suites listed in the config (or given by --suite).
    Run {
        #[command(flatten)]
        overrides: Overrides,
        /// Suites to run; repeatable or comma-separated.
        #[arg(long = "suite", value_enum, value_delimiter = ',')]
        suites: Vec<Suite>,
    },
}

fn resolve(command: Command) -> Result<ExperimentConfig, CliError> {
    let (overrides, suites) = match command {
        Command::Solve(o) => (o, Some(vec![Suite::Solve])),
        Command::Converge(o) => (o, Some(vec![Suite::Converge])),
        Command::BsdeApprox(o) => (o, Some(vec![Suite::BsdeApprox])),
        Command::Moduli(o) => (o, Some(vec![Suite::Moduli])),
        Command::Gronwall(o) => (o, Some(vec![Suite::Gronwall])),
        Command::OracleDiff(o) => (o, Some(vec![Suite::OracleDiff])),
        Command::Run { overrides, suites } => (overrides, (!suites.is_empty()).then_some(suites)),
    };
    let mut cfg = ExperimentConfig::resolve(&overrides)?;
    if let Some(s) = suites {
        cfg.suites = s;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { bsvie_cli::EXIT_CONFIG } else { bsvie_cli::EXIT_OK };
            return ExitCode::from(code as u8);
        }
    };
    let result = init_threads().and_then(|_| resolve(cli.command)).and_then(|cfg| run(&cfg));
    match result {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
