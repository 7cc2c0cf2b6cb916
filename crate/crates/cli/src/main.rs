//! `tweedie`: reproducible experiments on Tweedie-formula scores.
//!
//! ```text
//! tweedie <score-check|generate|dsm-fit|eb-run> --config run.cfg --seed 7 --out results/ [--threads 4]
//! ```
//!
//! Exit status is 0 on success, 1 on configuration or numerical errors and 2
//! when `score-check` finds a point outside its tolerance.

mod commands;
mod config;
mod output;
mod setup;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Context, Outcome};
use config::Config;
use output::RunManifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error(transparent)]
    Library(#[from] tweedie::Error),
    #[error("i/o error on {path}: {source}", path = .0.display(), source = .1)]
    Io(PathBuf, std::io::Error),
}

#[derive(Debug, Parser)]
#[command(name = "tweedie", version, about = "Tweedie-formula scores, samplers and empirical Bayes experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compare closed-form scores with finite differences of the quadrature marginal.
    ScoreCheck(RunArgs),
    /// Reverse-time Euler-Maruyama sampling.
    Generate(RunArgs),
    /// Per-slice least-squares score fits in a linear basis.
    DsmFit(RunArgs),
    /// Simulated Tweedie empirical Bayes.
    EbRun(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
}

fn run(name: &'static str, args: RunArgs, f: fn(&Config, &Context) -> Result<Outcome, CliError>) -> Result<Outcome, CliError> {
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(CliError::Config {
                key: "--threads".into(),
                message: "must be at least 1".into(),
            });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config {
                key: "--threads".into(),
                message: e.to_string(),
            })?;
    }
    let cfg = Config::load(&args.config)?;
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::Io(args.out.clone(), e))?;
    let manifest = RunManifest {
        subcommand: name,
        config_path: args.config,
        seed: args.seed,
        out_dir: args.out,
        version: env!("CARGO_PKG_VERSION"),
    };
    let header = manifest.header(&cfg);
    f(&cfg, &Context { manifest, header })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::ScoreCheck(a) => run("score-check", a, commands::score_check),
        Command::Generate(a) => run("generate", a, commands::generate),
        Command::DsmFit(a) => run("dsm-fit", a, commands::dsm_fit),
        Command::EbRun(a) => run("eb-run", a, commands::eb_run),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::ToleranceBreach { failures }) => {
            eprintln!("error: {failures} grid points outside tolerance");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
