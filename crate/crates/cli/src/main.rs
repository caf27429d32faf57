use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod synth;

use commands::Outcome;
use config::{ConfigError, RunConfig};

/// Contact-rate and reproduction-number estimation from ICU occupancy.
#[derive(Parser)]
#[command(name = "epirkhs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Forward-simulate a parametric contact model.
    Simulate(RunConfig),
    /// Fit one estimator to the lockdown window.
    Fit(RunConfig),
    /// Sample the posterior around a nonparametric fit and export bands.
    Mcmc(RunConfig),
    /// Laplacian-kernel fit of the period after the lockdown.
    PostLockdown(RunConfig),
    /// Every estimator, the posterior and the post-lockdown stage.
    ReproducePaper(RunConfig),
    /// Write the synthetic surrogate data set.
    SynthFixture {
        #[arg(long, default_value = "fixtures/synthetic")]
        out_dir: PathBuf,
    },
}

fn prepare(cfg: RunConfig) -> Outcome<RunConfig> {
    let cfg = cfg.load()?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ConfigError(format!("setting `threads`: {e}")))?;
    }
    Ok(cfg)
}

fn run(command: Command) -> Outcome<()> {
    match command {
        Command::Simulate(c) => commands::simulate(&prepare(c)?),
        Command::Fit(c) => commands::fit(&prepare(c)?).map(|_| ()),
        Command::Mcmc(c) => commands::mcmc(&prepare(c)?).map(|_| ()),
        Command::PostLockdown(c) => commands::post_lockdown(&prepare(c)?).map(|_| ()),
        Command::ReproducePaper(c) => commands::reproduce(&prepare(c)?),
        Command::SynthFixture { out_dir } => synth::write_fixture(&out_dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

