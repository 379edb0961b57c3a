use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gensc_core::harness::{self, Outcome, Overrides};
use gensc_core::semantic_codec::Backbone;

/// Semantic image transmission experiments: train the codec and refiner,
/// evaluate them against the baselines over noisy channels, and plot.
#[derive(Parser, Debug)]
#[command(name = "gensc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Use at most this many images of the split a command reads.
    #[arg(long, global = true, value_name = "N")]
    limit: Option<usize>,

    /// Output directory; overrides the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a codec (swin by default, cnn for the DeepJSCC baseline).
    TrainCodec {
        /// `swin` or `cnn`.
        #[arg(long)]
        backbone: Option<Backbone>,
        /// Continue from the saved checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Train the diffusion refiner on the saved swin codec.
    TrainRefiner {
        /// Stop after the pre-training stage.
        #[arg(long)]
        stage_a_only: bool,
    },
    /// Evaluate every configured method over the channel/SNR grid.
    Eval,
    /// Compare the refined and unrefined codec output.
    Ablate,
    /// Run the JPEG + LDPC + QAM baseline alone.
    Baseline,
    /// Redraw plots from results.csv.
    Plot,
}

fn run(cli: Cli) -> gensc_core::Result<Outcome> {
    let overrides = Overrides {
        seed: cli.global.seed,
        limit: cli.global.limit,
        out: cli.global.out,
    };
    let exp = harness::load_config(cli.global.config.as_deref(), &overrides)?;
    match cli.command {
        Command::TrainCodec { backbone, resume } => harness::train_codec(&exp, backbone, resume),
        Command::TrainRefiner { stage_a_only } => harness::train_refiner(&exp, stage_a_only),
        Command::Eval => harness::eval(&exp),
        Command::Ablate => harness::ablate(&exp),
        Command::Baseline => harness::baseline(&exp),
        Command::Plot => harness::plot(&exp),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(outcome) => {
            if let Some(table) = &outcome.table {
                if let Ok(csv) = table.to_csv_string() {
                    print!("{csv}");
                }
            }
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            println!("manifest: {}", outcome.manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
