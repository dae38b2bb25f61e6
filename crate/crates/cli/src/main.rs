use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vlnaug::{
    cmd_build_pretrain, cmd_evaluate, cmd_extract_templates, cmd_generate, cmd_predict_actions, CliError, RunConfig,
};

#[derive(Parser)]
#[command(name = "vlnaug", version, about = "Synthetic VLN data from driving videos")]
struct Cli {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the template bank from a corpus and its chunk annotations.
    ExtractTemplates {
        /// Compare retained counts with the reference template counts.
        #[arg(long)]
        compare_reference: bool,
    },
    /// Label consecutive frame pairs of every clip.
    PredictActions,
    /// Turn clips into instruction-trajectory samples.
    Generate,
    /// Emit MLM / ITM / NAP datasets from generated samples.
    BuildPretrain,
    /// Score predicted trajectories on a navigation graph.
    Evaluate,
}

fn build_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = Some(workers);
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Command::ExtractTemplates { compare_reference: true } = cli.command {
        cfg.compare_reference = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = build_config(&cli).and_then(|cfg| match cli.command {
        Command::ExtractTemplates { .. } => cmd_extract_templates(&cfg),
        Command::PredictActions => cmd_predict_actions(&cfg),
        Command::Generate => cmd_generate(&cfg),
        Command::BuildPretrain => cmd_build_pretrain(&cfg),
        Command::Evaluate => cmd_evaluate(&cfg),
    });
    match result {
        Ok(outcome) => ExitCode::from(outcome.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
