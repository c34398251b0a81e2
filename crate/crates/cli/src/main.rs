use clap::Parser;
use oscidiff_cli::{run_command, Command, ExperimentConfig, Options, FIXTURES_ENV};
use std::path::PathBuf;
use std::process::ExitCode;

/// Space-time periodic homogenization experiments.
#[derive(Parser, Debug)]
#[command(name = "oscidiff", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print tables as JSON.
    #[arg(long)]
    json: bool,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Also assert fitted rates ≥ 0.5 in `converge`.
    #[arg(long)]
    strict_rates: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let cfg = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let opts = Options {
        out: args
            .out
            .or_else(|| cfg.out.clone())
            .unwrap_or_else(|| PathBuf::from("oscidiff-out")),
        jobs: args.jobs,
        strict_rates: args.strict_rates,
        fixtures: std::env::var_os(FIXTURES_ENV).map(PathBuf::from),
    };
    let outcome = match run_command(args.command, &cfg, &opts) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if args.json {
        print!("{}", outcome.to_json());
    } else {
        print!("{}", outcome.render());
    }
    match &outcome.failure {
        Some(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        None => ExitCode::SUCCESS,
    }
}
