use clap::{Parser, Subcommand};
use radner_cli::commands::{self, CliError};
use radner_cli::RunConfig;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "radner", version, about = "Radner equilibrium solver and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (TOML)
    config: PathBuf,
    /// Output directory; defaults to [output].directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to available parallelism
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides [simulation].seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct WithSolution {
    #[command(flatten)]
    common: Common,
    /// Solution container; defaults to <out>/solution.bin
    #[arg(long)]
    solution: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the PDE system and write the solution container
    Solve(Common),
    /// Re-check a stored solution and emit diagnostics
    Verify(WithSolution),
    /// Cross-check against the heat-kernel fixed point
    Oracle(Common),
    /// Monte Carlo clearing and optimality diagnostics
    Simulate(WithSolution),
}

fn run(cli: Cli) -> Result<commands::Outcome, CliError> {
    let (common, solution) = match &cli.command {
        Command::Solve(c) | Command::Oracle(c) => (c, None),
        Command::Verify(w) | Command::Simulate(w) => (&w.common, w.solution.clone()),
    };
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Io(std::io::Error::other(e)))?;
    }
    let cfg_path: &Path = &common.config;
    let cfg = RunConfig::load(cfg_path).map_err(CliError::Config)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.output.directory.clone());
    let seed = common.seed.unwrap_or(cfg.simulation.seed);
    let solution = solution.unwrap_or_else(|| out.join("solution.bin"));
    match cli.command {
        Command::Solve(_) => commands::solve(&cfg, cfg_path, &out),
        Command::Verify(_) => commands::verify(&cfg, cfg_path, &solution, &out, seed),
        Command::Oracle(_) => commands::oracle(&cfg, cfg_path, &out),
        Command::Simulate(_) => commands::simulate(&cfg, cfg_path, &solution, &out, seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(outcome) => {
            println!("{}", serde_json::to_string(&outcome).expect("outcome serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
