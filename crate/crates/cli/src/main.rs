use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use unlearn_cli::commands;
use unlearn_cli::{CliResult, ExperimentConfig, Overrides};
use unlearn_core::metrics::Scenario;
use unlearn_core::unlearn::Mode;

#[derive(Parser)]
#[command(name = "latent-unlearn", version, about = "Single-image identity unlearning for latent image generators")]
struct Cli {
    /// JSON experiment config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root (default: $LATENT_UNLEARN_OUT, then ./runs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    scenario: Option<ScenarioArg>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic identity corpus.
    MakeData,
    /// Train the embedder, encoder and generator.
    Pretrain,
    /// Unlearn each configured source identity.
    Unlearn,
    /// Score finished unlearning runs and write summary.csv.
    Evaluate,
    /// Write a PNG contact sheet of finished runs.
    Grid,
    /// Sweep one unlearning hyperparameter over the configured values.
    Ablate,
    /// Print the resolved config.
    ShowConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Random,
    Ind,
    Ood,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Guide,
    Baseline,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    NoId,
}

fn run(cli: Cli) -> CliResult<()> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        scenario: cli.scenario.map(|s| match s {
            ScenarioArg::Random => Scenario::Random,
            ScenarioArg::Ind => Scenario::Ind,
            ScenarioArg::Ood => Scenario::Ood,
        }),
        mode: cli.mode.map(|m| match m {
            ModeArg::Guide => Mode::Guide,
            ModeArg::Baseline => Mode::Baseline,
        }),
        preset_no_id: matches!(cli.preset, Some(PresetArg::NoId)),
    };
    let cfg = base.resolve(&overrides)?;
    let written = match cli.command {
        Command::MakeData => commands::make_data(&cfg)?,
        Command::Pretrain => commands::pretrain(&cfg)?,
        Command::Unlearn => commands::unlearn(&cfg)?,
        Command::Evaluate => commands::evaluate(&cfg)?,
        Command::Grid => commands::grid(&cfg)?,
        Command::Ablate => commands::ablate(&cfg)?,
        Command::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
            return Ok(());
        }
    };
    println!("{}", written.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
