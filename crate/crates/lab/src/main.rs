use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stochknap_lab::config::{ExperimentConfig, Kind, Mode, Overrides};
use stochknap_lab::error::{LabError, LabResult};
use stochknap_lab::report::report;

#[derive(Parser)]
#[command(name = "stochknap", version, about = "Stochastic knapsack laboratory")]
struct Cli {
    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact dynamic program checked against brute-force enumeration.
    Solve(RunArgs),
    /// Monte Carlo variance scaling along a scale ladder.
    Simulate(RunArgs),
    /// Fluid PDE solve, DP ladder and residual studies.
    Fluid(RunArgs),
    /// Center ODE and diffusion compared with scaled Monte Carlo.
    Diffuse(RunArgs),
    /// Multi-resource DP, fluid and diffusion.
    Multi(RunArgs),
    /// Summarize every run under a directory.
    Report {
        /// A run directory, or a directory of run directories.
        dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML configuration, or a manifest.json from an earlier run.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Comma-separated scale factors, e.g. 25,50,100.
    #[arg(long, value_delimiter = ',')]
    scale_ladder: Option<Vec<usize>>,
}

fn run(kind: Kind, args: RunArgs) -> LabResult<()> {
    let config = ExperimentConfig::load(&args.config)?;
    let overrides = Overrides {
        kind: Some(kind),
        seed: args.seed,
        output: args.out,
        mode: args.mode,
        scale_ladder: args.scale_ladder,
    };
    let outcome = stochknap_lab::run(config, &overrides)?;
    println!("{} run written to {}", kind.name(), outcome.output.display());
    for m in &outcome.artifacts.metrics {
        let verdict = match m.pass {
            Some(true) => "pass",
            Some(false) => "FAIL",
            None => "",
        };
        println!("  {:<4} {:<32} {:<14e} {:<16} {verdict}", m.criterion, m.name, m.value, m.threshold);
    }
    for n in &outcome.artifacts.notes {
        println!("  note: {n}");
    }
    Ok(())
}

fn dispatch(cli: Cli) -> LabResult<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(LabError::Validation("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| LabError::Resource(e.to_string()))?;
    }
    match cli.command {
        Command::Solve(a) => run(Kind::DpCheck, a),
        Command::Simulate(a) => run(Kind::VarianceScaling, a),
        Command::Fluid(a) => run(Kind::FluidConvergence, a),
        Command::Diffuse(a) => run(Kind::DiffusionCompare, a),
        Command::Multi(a) => run(Kind::Multi, a),
        Command::Report { dir } => {
            let r = report(&dir)?;
            print!("{}", r.text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = LabError::Validation(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
