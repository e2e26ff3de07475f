use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use csl_cli::acceptance::AcceptanceOptions;
use csl_cli::commands::{self, CommandOutput};
use csl_cli::config::ScenarioConfig;
use csl_cli::CliError;
use serde_json::json;

#[derive(Parser)]
#[command(name = "csl", version, about = "CSL collapse simulator and conservation ledger")]
struct Cli {
    /// Worker threads for ensemble runs (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo ensemble plus the deterministic energy ledger.
    Run(FileArgs),
    /// Deterministic energy ledger only.
    Ledger(FileArgs),
    /// Collapse-postulate analyses on a momentum grid.
    Postulate(FileArgs),
    /// Runs the acceptance suite at the pinned seed.
    Verify,
}

#[derive(clap::Args)]
struct FileArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "csl-out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set thread count: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Run(args) => with_config(args, "run", cli.verbose, commands::run),
        Command::Ledger(args) => with_config(args, "ledger", cli.verbose, commands::ledger),
        Command::Postulate(args) => with_config(args, "postulate", cli.verbose, commands::postulate),
        Command::Verify => {
            let (outcomes, ok) = commands::verify(&AcceptanceOptions::default());
            for o in &outcomes {
                println!("{o}");
            }
            if ok {
                Ok(())
            } else {
                let failed: Vec<String> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id.to_string()).collect();
                Err(CliError::CheckFailed(format!("criteria {} failed", failed.join(", "))))
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn with_config(
    args: &FileArgs,
    name: &str,
    verbose: bool,
    command: fn(&ScenarioConfig) -> Result<CommandOutput, CliError>,
) -> Result<(), CliError> {
    let (cfg, text) = ScenarioConfig::from_file(&args.config)?;
    let start = Instant::now();
    let out = command(&cfg)?;
    let manifest = json!({
        "command": name,
        "code_version": env!("CARGO_PKG_VERSION"),
        "config_file": args.config.display().to_string(),
        "config_text": text,
        "config": serde_json::to_value(&cfg).expect("config serialises"),
        "seeds": out.seeds,
        "timings": { "wall_seconds": start.elapsed().as_secs_f64() },
    });
    for line in &out.summary {
        println!("{line}");
    }
    let names: Vec<String> = out.artifacts.files.iter().map(|a| a.name.clone()).collect();
    let manifest_name = format!("{}_manifest.json", cfg.output.stem);
    out.artifacts.write(&args.out, &manifest_name, manifest)?;
    if verbose {
        for n in names.iter().chain(std::iter::once(&manifest_name)) {
            println!("wrote {}", Path::new(&args.out).join(n).display());
        }
    }
    if out.passed {
        Ok(())
    } else {
        Err(CliError::Numerical(csl_core::Error::NotConverged {
            what: "energy conservation",
            achieved: f64::NAN,
            required: f64::NAN,
        }))
    }
}
