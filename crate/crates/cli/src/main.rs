mod commands;
mod run_manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "dcac", version, about = "Train and evaluate DC-AC skin-lesion classifiers")]
struct Cli {
    /// Worker threads for parallel kernels and image loading.
    #[arg(long, global = true, env = "DCAC_THREADS")]
    threads: Option<usize>,

    /// Report format on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,

    /// Where to write the run manifest for commands without an output directory.
    /// Defaults to a single JSON line on stderr.
    #[arg(long, global = true)]
    run_manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and multiply-accumulate footprint of a network.
    Analyze(commands::AnalyzeArgs),
    /// Remove duplicates and split a manifest by patient.
    Split(commands::SplitArgs),
    /// Two-phase training.
    Train(commands::TrainArgs),
    /// Score a manifest with a checkpoint and report AUROC.
    Evaluate(commands::EvaluateArgs),
    /// Finite-difference check of every layer's gradient.
    Gradcheck(commands::GradcheckArgs),
    /// Write augmented variants of one image.
    AugmentPreview(commands::AugmentPreviewArgs),
    /// Write the synthetic bright/dark disk dataset.
    MakeToy(commands::MakeToyArgs),
}

/// Options shared by commands that pick a network.
#[derive(Args, Clone)]
pub struct NetworkArgs {
    /// Network description (JSON).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in network: `paper` or `tiny`.
    #[arg(long)]
    pub preset: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let ctx = commands::Ctx {
        format: cli.format,
        run_manifest: cli.run_manifest,
        threads: cli.threads,
    };
    let result = match cli.command {
        Command::Analyze(a) => commands::analyze(&ctx, a),
        Command::Split(a) => commands::split(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Evaluate(a) => commands::evaluate(&ctx, a),
        Command::Gradcheck(a) => commands::gradcheck(&ctx, a),
        Command::AugmentPreview(a) => commands::augment_preview(&ctx, a),
        Command::MakeToy(a) => commands::make_toy(&ctx, a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
