use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dmdkit::commands::{self, exit_code, Outcome, EXIT_CONFIG};
use dmdkit::scenario::Scenario;
use dmdkit::{DmdError, Result};

/// Diffusive molecular dynamics with variational Gaussian free energies.
#[derive(Parser, Debug)]
#[command(name = "dmdkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Minimize the free energy over mean positions and stiffnesses.
    Minimize(Common),
    /// Evolve occupancies, re-minimizing along the way.
    Evolve(Common),
    /// Check the scenario's state against the brute-force oracle.
    Validate(Common),
    /// Compare the bounded-domain and whole-space functionals over a sweep
    /// of half-widths.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated half-widths, e.g. "4,8,16,32".
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<f64>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `outputs.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; falls back to DMDKIT_THREADS.
    #[arg(long)]
    threads: Option<usize>,
}

fn setup(common: &Common) -> Result<(Scenario, PathBuf)> {
    let threads = match common.threads {
        Some(t) => Some(t),
        None => match std::env::var("DMDKIT_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| DmdError::Config(format!("DMDKIT_THREADS={v:?} is not a count")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(DmdError::Config("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| DmdError::Config(e.to_string()))?;
    }
    let mut scenario = Scenario::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        scenario.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| scenario.outputs.dir.clone());
    Ok((scenario, out))
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Minimize(c) => {
            let (s, out) = setup(&c)?;
            commands::cmd_minimize(&s, &out)
        }
        Command::Evolve(c) => {
            let (s, out) = setup(&c)?;
            commands::cmd_evolve(&s, &out)
        }
        Command::Validate(c) => {
            let (s, out) = setup(&c)?;
            commands::cmd_validate(&s, &out)
        }
        Command::Compare { common, sweep } => {
            let (s, out) = setup(&common)?;
            commands::cmd_compare(&s, &out, &sweep)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    match run(cli) {
        Ok(outcome) => {
            for p in &outcome.artifacts {
                println!("wrote {}", p.display());
            }
            println!("{}", outcome.summary);
            ExitCode::from(outcome.exit_code)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
