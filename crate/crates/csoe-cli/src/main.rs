//! `csoe`: crowd-head localization by compressed-sensing output encoding.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or parse
//! error, 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use csoe_cli::commands::{self, DecodeArgs};
use csoe_cli::config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "csoe",
    version,
    about = "Crowd-head localization via compressed-sensing output encoding",
    long_about = "Synthesizes crowd scenes, projects head positions to sinograms, compresses \
                  them with a seeded Gaussian sensing matrix, trains a network to regress the \
                  codes with an unrolled sparse-recovery head, and decodes head positions by \
                  filtered backprojection. Every command is deterministic given the config file \
                  and its seeds."
)]
struct Cli {
    /// Experiment config (flat TOML); defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved configuration as TOML.
    PrintConfig,
    /// Synthesize scenes: binary images, x,y annotations, and a manifest.
    GenData {
        /// Number of scenes to generate.
        #[arg(long)]
        count: usize,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Project annotations to sinograms and compress them to codes.
    Encode {
        /// Data directory produced by gen-data.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Recover head positions from an image (trained model) or codes (oracle solver).
    Decode {
        /// Trained model container; requires --image.
        #[arg(long, value_name = "FILE", requires = "image", conflicts_with_all = ["codes", "sensing"])]
        model: Option<PathBuf>,
        /// Input image (.bin or 8-bit grayscale .png mapped to [0, 1]).
        #[arg(long, value_name = "FILE")]
        image: Option<PathBuf>,
        /// Stored code file; requires --sensing.
        #[arg(long, value_name = "FILE", requires = "sensing")]
        codes: Option<PathBuf>,
        /// Sensing matrix file written by encode.
        #[arg(long, value_name = "FILE")]
        sensing: Option<PathBuf>,
        /// Output JSON; prints to stdout when omitted.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Train the localization model on a generated data directory.
    Train {
        /// Data directory produced by gen-data.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Where to write the trained model container.
        #[arg(long, value_name = "FILE")]
        model_out: PathBuf,
        /// Where to write the training log CSV. When resuming, rows already
        /// logged at this path are preserved.
        #[arg(long, value_name = "FILE")]
        log: PathBuf,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a trained model: per-image CSV, summary JSON, density table.
    Eval {
        /// Trained model container.
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Data directory with ground-truth annotations.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Output prefix; writes <prefix>.csv and <prefix>.json.
        #[arg(long, value_name = "PATH")]
        out_prefix: PathBuf,
        /// Also write <prefix>.density.csv with this many density groups.
        #[arg(long, value_name = "N")]
        density_groups: Option<usize>,
    },
    /// Verify reconstruction-layer and network gradients against finite differences.
    Gradcheck {
        /// Reduced instance counts for a fast check.
        #[arg(long)]
        quick: bool,
    },
    /// Train and score architecture variants on synthetic splits.
    Ablate {
        /// Training scenes to synthesize.
        #[arg(long)]
        train_count: usize,
        /// Evaluation scenes to synthesize.
        #[arg(long)]
        eval_count: usize,
        /// Output CSV path.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Toggle set like "csoe,mdcb,arfw,cp" or "none"; repeatable.
        /// All valid subsets run when omitted.
        #[arg(long, value_name = "SET")]
        toggles: Vec<String>,
    },
    /// Merge CSV artifacts into one JSON summary with per-column statistics.
    Report {
        /// Input CSV files.
        #[arg(long, value_name = "FILE", num_args = 1..)]
        inputs: Vec<PathBuf>,
        /// Output JSON path.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

fn exit_code(e: &csoe::Error) -> u8 {
    use csoe::Error::*;
    match e {
        Config(_) => 1,
        Domain(_) | Generation(_) | Parse { .. } | Io { .. } => 2,
        Numeric(_) | SingularSupport(_) => 3,
    }
}

fn run(cli: Cli) -> csoe::Result<()> {
    let cfg = ExperimentConfig::load(cli.config.as_deref())?;
    if cfg.threads > 0 {
        csoe::exec::configure_threads(cfg.threads);
    }
    match cli.command {
        Command::PrintConfig => commands::cmd_print_config(&cfg),
        Command::GenData { count, out } => commands::cmd_gen_data(&cfg, count, &out),
        Command::Encode { data, out } => commands::cmd_encode(&cfg, &data, &out),
        Command::Decode { model, image, codes, sensing, out } => {
            commands::cmd_decode(&cfg, &DecodeArgs { model, image, codes, sensing, out })
        }
        Command::Train { data, model_out, log, resume } => {
            commands::cmd_train(&cfg, &data, &model_out, &log, resume.as_deref())
        }
        Command::Eval { model, data, out_prefix, density_groups } => {
            commands::cmd_eval(&cfg, &model, &data, &out_prefix, density_groups)
        }
        Command::Gradcheck { quick } => commands::cmd_gradcheck(quick),
        Command::Ablate { train_count, eval_count, out, toggles } => {
            commands::cmd_ablate(&cfg, train_count, eval_count, &out, &toggles)
        }
        Command::Report { inputs, out } => commands::cmd_report(&cfg, &inputs, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
