use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use exposure_dro_cli::{
    cmd_evaluate, cmd_report, cmd_simulate, cmd_train, cmd_train_exposure, CliError, ExperimentConfig, Result,
};

#[derive(Parser)]
#[command(name = "exposure-dro", version, about = "Exposure-debiased sequential recommendation experiments")]
struct Cli {
    /// TOML config; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (must exist). For `report`, where report.csv is written.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and its exposure/click log.
    Simulate,
    /// Train the exposure and evaluation simulators.
    TrainExposure,
    /// Train the configured backbone and debiasing method.
    Train,
    /// Write naive, SNIPS and (if available) oracle metrics.
    Evaluate,
    /// Aggregate metrics of several run directories into one CSV table.
    Report { runs: Vec<PathBuf> },
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.out_dir = Some(out);
    }
    if let Command::Report { runs } = &cli.command {
        let table = cmd_report(runs)?;
        match &config.out_dir {
            Some(dir) => {
                let path = dir.join("report.csv");
                std::fs::write(&path, table).map_err(|e| CliError::io(&path, e))?;
            }
            None => print!("{table}"),
        }
        return Ok(());
    }
    let out = config.out_dir.clone().ok_or_else(|| CliError::Config("no run directory: pass --out".into()))?;
    match cli.command {
        Command::Simulate => cmd_simulate(&config, &out),
        Command::TrainExposure => cmd_train_exposure(&config, &out).map(drop),
        Command::Train => cmd_train(&config, &out).map(drop),
        Command::Evaluate => cmd_evaluate(&config, &out).map(drop),
        Command::Report { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
