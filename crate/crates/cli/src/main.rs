use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use starnoma_cli::{output, pipeline, scenario::Scenario};

#[derive(Parser, Debug)]
#[command(
    name = "starnoma",
    version,
    about = "Rates and phase optimization for STAR-RIS aided MIMO-NOMA"
)]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario file and write its tables into a directory.
    Run {
        /// TOML scenario file.
        scenario: PathBuf,
        /// Output directory, created if missing.
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
        /// Worker threads for Monte-Carlo trials (0 uses every core).
        #[arg(long, default_value_t = 0)]
        threads: usize,
        /// Overrides `run.seed` of the scenario.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parse and validate a scenario file without running it.
    Check { scenario: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Check { scenario } => {
            let (s, _) = Scenario::load(&scenario)?;
            let (axis, values) = s.sweep_values();
            println!(
                "{}: {} pipeline, {} point(s) on {}",
                scenario.display(),
                s.run.pipeline.name(),
                values.len(),
                axis.name()
            );
        }
        Command::Run {
            scenario,
            out,
            threads,
            seed,
        } => {
            let (mut s, bytes) = Scenario::load(&scenario)?;
            if let Some(seed) = seed {
                s.run.seed = seed;
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global()
                .context("starting the worker pool")?;
            let result = pipeline::run(&s)?;
            for path in output::write_all(&out, &s, &bytes, &result)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
