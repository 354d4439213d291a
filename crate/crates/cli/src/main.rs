use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mpmp_cli::{parse_config, run, EXIT_CONFIG, EXIT_NUMERICAL};

/// Numerical checks of the stochastic maximum principle.
#[derive(Parser, Debug)]
#[command(name = "mpmp", version)]
struct Args {
    /// Experiment configuration (TOML).
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(short = 'j', long)]
    threads: Option<usize>,
    /// More logging; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only errors.
    #[arg(short, long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let level = match (args.quiet, args.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();

    let text = match fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {}: {e}", args.config.display());
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    let mut config = match parse_config(&text) {
        Ok(c) => c,
        Err(errors) => {
            eprintln!("invalid configuration:\n{errors}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    if let Some(seed) = args.seed {
        config.set_seed(seed);
    }
    let out_dir = args
        .out
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(format!("mpmp-out/{}", config.scenario.name())));

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.threads {
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("cannot start worker threads: {e}");
            return ExitCode::from(EXIT_NUMERICAL as u8);
        }
    };
    match pool.install(|| run(&config, &text, &out_dir)) {
        Ok(outcome) => {
            if !args.quiet {
                print!("{}", outcome.report);
            }
            log::info!("artifacts in {}", out_dir.display());
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(EXIT_NUMERICAL as u8)
        }
    }
}
