//! `latr`: train, evaluate, embed, gradient-check and synthesize data for LA-Transformer.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

/// Environment variable that overrides the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "LATR_OUTPUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "latr", version, about = "LA-Transformer person re-identification")]
struct Cli {
    /// Run on a single thread so every result is bit-reproducible.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

/// Config sources, applied in order: profile, file, `--set` overrides.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML config file; its `profile` key picks the base profile.
    #[arg(long, short)]
    pub config: Option<PathBuf>,

    /// Base profile when the file names none.
    #[arg(long, default_value = "toy")]
    pub profile: String,

    /// `key.path=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EmbeddingFormat {
    Binary,
    Jsonl,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train with blockwise fine-tuning; writes metrics.jsonl, last.ckpt and best.ckpt.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Market-1501-style dataset root, replacing the configured data source.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory (overrides the environment and the config).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Continue from a checkpoint using its stored config plus `--set` overrides.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on query and gallery sets; writes eval.json and eval.txt.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Market-1501-style dataset root; defaults to the checkpoint's data source.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Precomputed query embeddings instead of embedding the query split.
        #[arg(long)]
        query_embeddings: Option<PathBuf>,
        /// Precomputed gallery embeddings instead of embedding the gallery split.
        #[arg(long)]
        gallery_embeddings: Option<PathBuf>,
        /// `key.path=value` override of the stored config (for example `eval.max_rank=20`).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Embed every image of a directory into an embedding file.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "binary")]
        format: EmbeddingFormat,
    },
    /// Finite-difference gradient checks per operation, component and end to end.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Defaults to the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = la_transformer::checks::DEFAULT_TOLERANCE)]
        tolerance: f64,
        /// Perturb one analytic gradient coordinate per check; every check must then fail.
        #[arg(long)]
        corrupt: bool,
        /// Skip the whole-model check.
        #[arg(long)]
        no_end_to_end: bool,
        /// Write the results as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate the configured synthetic dataset as a Market-1501-style tree.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved config as TOML.
    Config {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.deterministic {
        commands::single_thread()?;
    }
    match cli.command {
        Command::Train {
            config,
            data,
            output,
            resume,
        } => commands::train(&config, data.as_deref(), output.as_deref(), resume.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            query_embeddings,
            gallery_embeddings,
            overrides,
            output,
        } => commands::eval(&commands::EvalArgs {
            checkpoint,
            data,
            query_embeddings,
            gallery_embeddings,
            overrides,
            output,
        }),
        Command::Embed {
            checkpoint,
            images,
            out,
            format,
        } => commands::embed(&checkpoint, &images, &out, format),
        Command::Gradcheck {
            config,
            seed,
            tolerance,
            corrupt,
            no_end_to_end,
            report,
        } => commands::gradcheck(&config, seed, tolerance, corrupt, !no_end_to_end, report.as_deref()),
        Command::Synth { config, out } => commands::synth(&config, &out),
        Command::Config { config } => commands::show_config(&config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(error::EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
