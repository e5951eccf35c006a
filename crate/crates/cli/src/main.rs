//! `odcast` — probabilistic origin-destination demand forecasting.
//!
//! Six file-to-file subcommands share one JSON config: `ingest` and `synth`
//! produce demand tensors, `train` fits a model, `evaluate`, `predict`, and
//! `export-surfaces` consume the checkpoint. Exit codes: 0 success, 1 bad
//! invocation or config, 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use commands::{CliError, Ctx};
use config::RunConfig;
use odcast::tweedie::FamilyKind;

#[derive(Parser)]
#[command(
    name = "odcast",
    version,
    about = "Forecast full demand distributions for origin-destination pairs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Aggregate a trip-record CSV into a demand tensor.
    Ingest(CommonArgs),
    /// Draw a synthetic demand tensor with known true parameters.
    Synth(CommonArgs),
    /// Fit the configured model and checkpoint the best validation epoch.
    Train(CommonArgs),
    /// Score a checkpoint on the test split and write a metrics report.
    Evaluate(CommonArgs),
    /// Forecast the horizon right after the tensor's last window.
    Predict(CommonArgs),
    /// Export learned parameter surfaces over the test split as CSV.
    #[command(name = "export-surfaces")]
    ExportSurfaces(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration JSON.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the config's root seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Override the config's family: tweedie|gaussian|poisson|gamma|invgauss.
    #[arg(long, value_name = "NAME")]
    family: Option<String>,
    /// Replace existing output artifacts instead of aborting.
    #[arg(long)]
    overwrite: bool,
    /// Directory artifacts are written to (created if missing).
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
}

fn build_ctx(args: &CommonArgs) -> Result<Ctx, CliError> {
    let mut cfg = RunConfig::load(&args.config).map_err(|e| CliError::Usage(e.message))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(name) = &args.family {
        cfg.family =
            FamilyKind::from_str(name).map_err(|e| CliError::Usage(format!("--family: {e}")))?;
    }
    let out_dir = args
        .output_dir
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out_dir).map_err(|e| {
        CliError::Runtime(format!("cannot create output dir {}: {e}", out_dir.display()))
    })?;
    Ok(Ctx {
        cfg,
        out_dir,
        overwrite: args.overwrite,
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Ingest(args) => commands::ingest(&build_ctx(args)?),
        Command::Synth(args) => commands::synth(&build_ctx(args)?),
        Command::Train(args) => commands::run_train(&build_ctx(args)?),
        Command::Evaluate(args) => commands::evaluate(&build_ctx(args)?),
        Command::Predict(args) => commands::run_predict(&build_ctx(args)?),
        Command::ExportSurfaces(args) => commands::export_surfaces(&build_ctx(args)?),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        let code = match &e {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        };
        eprintln!("error: {e}");
        std::process::exit(code);
    }
}
