use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cellthresh::pipeline::{self, ModelKind, ModelSelection, RunConfig, Stage, StageError};

/// Pseudo-stage for configuration problems, reported as usage errors.
const CONFIG_STAGE: &str = "config";

#[derive(Parser)]
#[command(name = "cellthresh", version, about = "Adaptive alarm-threshold prediction for cellular networks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Work directory; beats the config file and the environment.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic alarm snapshots.
    Synth {
        #[arg(long, value_enum, default_value_t = SynthFormat::Snapshots)]
        format: SynthFormat,
    },
    /// Parse snapshots into cell-day aggregates.
    Ingest,
    /// Build scaled feature rows for the time-ordered split.
    Features,
    /// Derive threshold labels and run the holdout KS check.
    Label,
    /// Train a model.
    Train {
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
    },
    /// Predict thresholds for the test rows.
    Predict {
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
    },
    /// Metrics and Wilcoxon tests; `--models all` adds the naive baseline.
    Evaluate {
        #[arg(long, value_parser = parse_selection)]
        models: Option<ModelSelection>,
    },
    /// Alpha, quantile spread and data audit reports.
    Report,
    /// Run every stage in order.
    Pipeline,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthFormat {
    Snapshots,
    CellDays,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Pctn,
    Itransformer,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Pctn => ModelKind::Pctn,
            ModelArg::Itransformer => ModelKind::ITransformer,
        }
    }
}

fn parse_selection(s: &str) -> Result<ModelSelection, String> {
    s.parse().map_err(|e: cellthresh::Error| e.to_string())
}

fn models(cfg: &RunConfig, arg: Option<ModelArg>) -> Vec<ModelKind> {
    arg.map_or_else(|| cfg.models.clone(), |m| vec![m.into()])
}

fn run(cli: Cli) -> Result<(), StageError> {
    let mut overrides = cli.common.overrides;
    if let Some(dir) = &cli.common.work_dir {
        overrides.push(format!("work_dir={}", dir.display()));
    }
    let cfg = RunConfig::load(cli.common.config.as_deref(), &overrides).map_err(|source| StageError {
        stage: CONFIG_STAGE,
        source,
    })?;
    if cli.common.sequential {
        cellthresh::par::set_enabled(false);
    }
    match cli.command {
        Command::Synth { format } => pipeline::run_stage(Stage::Synth, || match format {
            SynthFormat::Snapshots => pipeline::run_synth(&cfg),
            SynthFormat::CellDays => pipeline::run_synth_cell_days(&cfg),
        }),
        Command::Ingest => pipeline::run_stage(Stage::Ingest, || pipeline::run_ingest(&cfg)),
        Command::Features => pipeline::run_stage(Stage::Features, || pipeline::run_features(&cfg)),
        Command::Label => pipeline::run_stage(Stage::Label, || pipeline::run_label(&cfg)),
        Command::Train { model } => pipeline::run_stage(Stage::Train, || {
            models(&cfg, model).into_iter().try_for_each(|m| pipeline::run_train(&cfg, m))
        }),
        Command::Predict { model } => pipeline::run_stage(Stage::Predict, || {
            models(&cfg, model).into_iter().try_for_each(|m| pipeline::run_predict(&cfg, m))
        }),
        Command::Evaluate { models } => pipeline::run_stage(Stage::Evaluate, || {
            pipeline::run_evaluate(&cfg, &models.unwrap_or(ModelSelection::Configured))
        }),
        Command::Report => pipeline::run_stage(Stage::Report, || pipeline::run_report(&cfg)),
        Command::Pipeline => pipeline::run_pipeline(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.stage == CONFIG_STAGE => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
