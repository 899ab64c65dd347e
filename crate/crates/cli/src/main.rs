use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use privdistil_cli::commands::{self, Invocation};
use privdistil_cli::config::ExperimentConfig;
use privdistil_cli::error::CliResult;

#[derive(Parser)]
#[command(name = "privdistil", version, about = "Privileged-information distillation experiments")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// Experiment config (JSON).
    #[arg(long, global = true, default_value = "privdistil.json")]
    config: PathBuf,
    /// Restrict to one run of `train.runs`.
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Restrict to one seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output location override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Refuse nondeterministic execution paths.
    #[arg(long, global = true)]
    strict_deterministic: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Verb {
    /// Generate the procedural dataset.
    Procgen,
    /// Write privileged images next to the primaries.
    Synth,
    /// Train an image translator.
    TrainTranslator,
    /// Train encoders for each run and seed.
    Train,
    /// Linear probe, shift and clustering metrics.
    Eval,
    /// Guided Grad-CAM maps and nucleus focus.
    Saliency,
    /// Aggregate results.
    Report,
}

fn run(cli: &Cli) -> CliResult<String> {
    let mut cfg = ExperimentConfig::load(&cli.config, std::env::vars())?;
    let inv = Invocation {
        run_id: cli.run_id.clone(),
        seed: cli.seed,
        out: cli.out.clone(),
        strict_deterministic: cli.strict_deterministic,
    };
    match cli.verb {
        Verb::Procgen => commands::cmd_procgen(&mut cfg, &inv),
        Verb::Synth => commands::cmd_synth(&cfg, &inv),
        Verb::TrainTranslator => commands::cmd_train_translator(&cfg, &inv),
        Verb::Train => commands::cmd_train(&cfg, &inv),
        Verb::Eval => commands::cmd_eval(&cfg, &inv),
        Verb::Saliency => commands::cmd_saliency(&cfg, &inv),
        Verb::Report => commands::cmd_report(&cfg, &inv),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(msg) => {
            if !msg.is_empty() {
                println!("{msg}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
