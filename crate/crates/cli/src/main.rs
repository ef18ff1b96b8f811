//! `nsmra`: staged pipeline from raw observations to a gridded prediction
//! product. Every stage reads and writes files under the configured work
//! directory.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::config::Config;
use crate::manifest::Manifest;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("missing input {}: {hint}", path.display())]
    MissingInput { path: PathBuf, hint: String },
    #[error(transparent)]
    Core(#[from] nsmra::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 for validation, 3 for numerical and 4 for transport failures.
    pub fn exit_code(&self) -> u8 {
        use nsmra::Error as E;
        match self {
            CliError::Config(_) | CliError::MissingInput { .. } | CliError::Io(_) => 2,
            CliError::Core(e) => match e {
                E::Numerical { .. } | E::Fit(_) | E::NotPositiveDefinite { .. } => 3,
                E::Transport(_) | E::Timeout { .. } => 4,
                E::Domain(_) | E::Invalid(_) | E::Parse { .. } | E::Io(_) => 2,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "nsmra", version, about = "Nonstationary multi-resolution spatial prediction")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(short, long, global = true, default_value = "nsmra.toml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Select and fit the latitude trend by cross-validation.
    FitTrend,
    /// Local covariance estimates on the parameter grid.
    EstimateLocal,
    /// Smooth the local estimates into a parameter field.
    SmoothParams,
    /// Partition the study box into the region tree.
    BuildTree,
    /// Stationary Matérn fit by M-RA likelihood.
    FitStationary,
    /// Predict the residual field on the output grid.
    Predict,
    /// Score the configured model on held-out observations.
    Evaluate {
        /// Observation file holding the test data.
        #[arg(long)]
        test: PathBuf,
    },
    /// Gap hold-out comparison of the stationary and nonstationary models.
    GapExperiment,
    /// Host one non-root rank of a TCP prediction cluster.
    ServeWorker {
        #[arg(long)]
        rank: u32,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::FitTrend => "fit-trend",
            Command::EstimateLocal => "estimate-local",
            Command::SmoothParams => "smooth-params",
            Command::BuildTree => "build-tree",
            Command::FitStationary => "fit-stationary",
            Command::Predict => "predict",
            Command::Evaluate { .. } => "evaluate",
            Command::GapExperiment => "gap-experiment",
            Command::ServeWorker { .. } => "serve-worker",
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let start = Instant::now();
    let text = std::fs::read_to_string(&cli.config)
        .map_err(|e| CliError::Config(format!("{}: {e}", cli.config.display())))?;
    let cfg = Config::load(&cli.config)?;
    let name = match &cli.command {
        Command::ServeWorker { rank } => format!("serve-worker.{rank}"),
        c => c.name().to_string(),
    };
    let mut m = Manifest::new(&name, &cli.config, text, cfg.seed);
    match &cli.command {
        Command::FitTrend => commands::fit_trend(&cfg, &mut m)?,
        Command::EstimateLocal => commands::estimate_local(&cfg, &mut m)?,
        Command::SmoothParams => commands::smooth_params(&cfg, &mut m)?,
        Command::BuildTree => commands::build_tree(&cfg, &mut m)?,
        Command::FitStationary => commands::fit_stationary(&cfg, &mut m)?,
        Command::Predict => commands::predict_grid(&cfg, &mut m)?,
        Command::Evaluate { test } => commands::evaluate(&cfg, test, &mut m)?,
        Command::GapExperiment => commands::gap_experiment(&cfg, &mut m)?,
        Command::ServeWorker { rank } => commands::serve_worker(&cfg, *rank, &mut m)?,
    }
    m.wall_time_s = commands::elapsed(start);
    std::fs::create_dir_all(&cfg.work_dir)?;
    std::fs::write(cfg.path(&m.file_name()), m.to_json())?;
    log::info!("{} finished in {:.1} s", cli.command.name(), m.wall_time_s);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nsmra::partition::RegionId;

    #[test]
    fn exit_codes_follow_the_failure_class() {
        let core = |e: nsmra::Error| CliError::Core(e).exit_code();
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::MissingInput { path: "a".into(), hint: "b".into() }.exit_code(), 2);
        assert_eq!(core(nsmra::Error::invalid("x")), 2);
        assert_eq!(core(nsmra::Error::parse("f", 3, "x")), 2);
        assert_eq!(core(nsmra::Error::Fit("x".into())), 3);
        assert_eq!(core(nsmra::Error::Numerical { region: RegionId::ROOT, msg: "x".into() }), 3);
        assert_eq!(core(nsmra::Error::NotPositiveDefinite { context: "x".into() }), 3);
        assert_eq!(core(nsmra::Error::Transport("x".into())), 4);
        assert_eq!(core(nsmra::Error::Timeout { missing: Vec::new() }), 4);
    }

    #[test]
    fn cli_parses_every_subcommand() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["nsmra", "-c", "x.toml", "serve-worker", "--rank", "2"]).unwrap();
        assert!(matches!(cli.command, Command::ServeWorker { rank: 2 }));
        assert!(Cli::try_parse_from(["nsmra", "evaluate"]).is_err());
    }
}
