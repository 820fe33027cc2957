//! `smokecausal`: simulate, fit, diagnose, predict, cross-validate, burden.
//!
//! Exit codes: 0 success, 2 validation or load error, 3 numerical failure,
//! 4 I/O error.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smokecausal_core::Error;

use crate::config::Effective;
use crate::manifest::Recorder;

#[derive(Parser, Debug)]
#[command(name = "smokecausal", version, about = "Fire-contributed PM2.5: spatial causal effects and health burden")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic study: sites, panel, truth, grid, counties, baseline rates.
    Simulate(Flags),
    /// Run the Gibbs sampler per region.
    Fit(Flags),
    /// ESS, residual ACF, variogram goodness of fit, covariance curves, traces.
    Diagnose(Flags),
    /// Krige posterior summaries to grid cells.
    Predict(Flags),
    /// Cross-validate the smoke threshold.
    Cv(Flags),
    /// Excess hospitalizations per county and age group.
    Burden(Flags),
    /// Compare joint and separate fits of two regions.
    Blocking(Flags),
    /// fit, diagnose, predict and burden in one go.
    E2e(Flags),
}

#[derive(Args, Debug, Clone, Default)]
pub struct Flags {
    #[arg(long)]
    pub sites: Option<PathBuf>,
    #[arg(long)]
    pub panel: Option<PathBuf>,
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long)]
    pub counties: Option<PathBuf>,
    #[arg(long)]
    pub rates: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Smoke threshold on the fire-contribution covariate.
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    /// Comma-separated thresholds for cross-validation.
    #[arg(long, value_delimiter = ',')]
    pub tau_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub burnin: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// JSON configuration; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated regions fitted as one block (two regions for `blocking`).
    #[arg(long, value_delimiter = ',')]
    pub merge_regions: Option<Vec<String>>,
    /// Comma-separated trace selection, `param` or `param@site_id`.
    #[arg(long, value_delimiter = ',')]
    pub trace: Option<Vec<String>>,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else if e.is_io() {
        4
    } else {
        2
    }
}

fn run(name: &str, flags: &Flags) -> Result<(), Error> {
    let eff = Effective::resolve(name, flags)?;
    if let Some(j) = eff.config.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build_global()
            .map_err(|e| Error::Parameter(format!("--jobs: {e}")))?;
    }
    std::fs::create_dir_all(&eff.out).map_err(|e| Error::io(eff.out.display().to_string(), e))?;
    let mut rec = Recorder::default();
    let result = match name {
        "simulate" => commands::simulate(&eff, &mut rec),
        "fit" => commands::fit(&eff, &mut rec),
        "diagnose" => commands::diagnose(&eff, &mut rec),
        "predict" => commands::predict(&eff, &mut rec),
        "cv" => commands::cv(&eff, &mut rec),
        "burden" => commands::burden(&eff, &mut rec),
        "blocking" => commands::blocking(&eff, &mut rec),
        "e2e" => commands::end_to_end(&eff, &mut rec),
        other => unreachable!("unknown command {other}"),
    };
    let written = rec.write(&eff, result.as_ref().err());
    result.and(written)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SMOKECAUSAL_LOG", "warn")).init();
    let cli = Cli::parse();
    let (name, flags) = match &cli.command {
        Command::Simulate(f) => ("simulate", f),
        Command::Fit(f) => ("fit", f),
        Command::Diagnose(f) => ("diagnose", f),
        Command::Predict(f) => ("predict", f),
        Command::Cv(f) => ("cv", f),
        Command::Burden(f) => ("burden", f),
        Command::Blocking(f) => ("blocking", f),
        Command::E2e(f) => ("e2e", f),
    };
    match run(name, flags) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
