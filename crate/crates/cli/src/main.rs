//! `causalgrid <subcommand> --config <path> [--out <dir>] [--seed <u64>]`
//!
//! Exit status: 0 on success, 2 on a validation error, 3 when a stage fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use causalgrid::pipeline::{self, Failure, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "causalgrid", version, about = "Causal effect estimation on spatial grid data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the grid and its feature table from raw inputs.
    GridBuild(Common),
    /// Select covariates and write the standardized analysis table.
    Screen(Common),
    /// Cross-fitted estimates for every treatment and learner, plus OLS.
    Dml(Common),
    /// Shapley attributions of the nuisance models.
    Shap(Common),
    /// Honest causal forest CATEs and ATE.
    Cforest(Common),
    /// Subgroups, semi-elasticities, subtype forests and the CATE map.
    Hetero(Common),
    /// Monte Carlo scoring of estimators on a synthetic process.
    Simulate(Common),
    /// Render summary tables from stored artifacts.
    Report(Common),
    /// Every stage in order.
    Run(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

fn stages_of(cmd: &Command, cfg: &RunConfig) -> Vec<Stage> {
    match cmd {
        Command::GridBuild(_) => vec![Stage::GridBuild],
        Command::Screen(_) => vec![Stage::Screen],
        Command::Dml(_) => vec![Stage::Dml],
        Command::Shap(_) => vec![Stage::Shap],
        Command::Cforest(_) => vec![Stage::Cforest],
        Command::Hetero(_) => vec![Stage::Hetero],
        Command::Simulate(_) => vec![Stage::Simulate],
        Command::Report(_) => vec![Stage::Report],
        Command::Run(_) => pipeline::full_run(cfg),
    }
}

fn common(cmd: &Command) -> &Common {
    match cmd {
        Command::GridBuild(c)
        | Command::Screen(c)
        | Command::Dml(c)
        | Command::Shap(c)
        | Command::Cforest(c)
        | Command::Hetero(c)
        | Command::Simulate(c)
        | Command::Report(c)
        | Command::Run(c) => c,
    }
}

fn load(c: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&c.config).map_err(Failure::Validation)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<PathBuf, Failure> {
    let c = common(&cli.command);
    let cfg = load(c)?;
    let stages = stages_of(&cli.command, &cfg);
    let out = pipeline::output_dir(&cfg, c.out.as_deref());
    pipeline::execute(&cfg, &out, &stages)?;
    Ok(out)
}

fn report_to_stdout(out: &Path) {
    if let Ok(text) = std::fs::read_to_string(out.join(pipeline::REPORT)) {
        print!("{text}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            if matches!(cli.command, Command::Report(_) | Command::Run(_)) {
                report_to_stdout(&out);
            }
            eprintln!("artifacts in {}", out.display());
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
