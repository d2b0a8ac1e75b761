//! Command-line driver for the learngene pool pipeline: synthetic data,
//! auxiliary distillation, pool construction and finetuning, descendant
//! assembly, evaluation, and closed-form cost accounting.
//!
//! One command per process. The resolved configuration is echoed to stdout
//! before any work runs and is embedded in every artifact the command
//! writes. Exit codes: 0 success, 1 usage, 2 validation, 3 numeric failure.

mod config;
mod error;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{load_file, AuxKind, Overrides, PathModeArg, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(
    name = "learngene",
    version,
    about = "Learngene pool construction and descendant assembly"
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset.
    GenData {
        /// Number of samples.
        #[arg(long, default_value_t = 128)]
        count: usize,
    },
    /// Train one model: the ancestry (supervised) or an auxiliary
    /// (distilled from the ancestry checkpoint).
    DistillAux {
        /// Which model to train.
        #[arg(long, value_enum)]
        aux: AuxKind,
    },
    /// Harvest both auxiliaries into a pool and initialize its stitches.
    BuildPool,
    /// Finetune the pool over sampled paths.
    FinetunePool,
    /// List every path the pool supports.
    Enumerate {
        /// Path slice; defaults to the configured pipeline mode.
        #[arg(long, value_enum)]
        mode: Option<PathModeArg>,
        /// Pool size override, counting instances across both rows.
        #[arg(long)]
        pool: Option<usize>,
    },
    /// Closed-form parameter and flop cost per path.
    Account {
        /// Path slice; defaults to the configured pipeline mode.
        #[arg(long, value_enum)]
        mode: Option<PathModeArg>,
        /// Pool size override, counting instances across both rows.
        #[arg(long)]
        pool: Option<usize>,
        /// Keep only paths at or under this parameter count.
        #[arg(long)]
        max_params: Option<u64>,
        /// Keep only paths at or under this flop count.
        #[arg(long)]
        max_flops: Option<u64>,
    },
    /// Materialize one descendant from a finetuned pool.
    Assemble {
        /// Path id, e.g. k2m2.
        #[arg(long)]
        path: String,
        /// Pool checkpoint to read; defaults to the finetuned pool.
        #[arg(long, value_name = "FILE")]
        from: Option<PathBuf>,
    },
    /// Evaluate a descendant checkpoint on the dataset.
    Eval {
        /// Path id of the descendant to load.
        #[arg(long)]
        path: Option<String>,
        /// Explicit checkpoint; defaults to the one `--path` names.
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
    },
    /// Finite-difference check of every tensor operation.
    Gradcheck,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help and version print to stdout and exit 0; real usage
            // errors exit 1.
            let code: u8 = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = load_file(cli.overrides.config.as_deref())?;
    let cfg = RunConfig::resolve(file, &cli.overrides)?;
    println!("# resolved configuration (fnv1a64 {:016x})", cfg.hash());
    print!("{}", cfg.to_toml());
    println!();
    match cli.command {
        Command::GenData { count } => stages::run_gen_data(&cfg, count),
        Command::DistillAux { aux } => stages::run_distill_aux(&cfg, aux),
        Command::BuildPool => stages::run_build_pool(&cfg),
        Command::FinetunePool => stages::run_finetune(&cfg),
        Command::Enumerate { mode, pool } => stages::run_enumerate(&cfg, mode, pool),
        Command::Account { mode, pool, max_params, max_flops } => {
            stages::run_account(&cfg, mode, pool, max_params, max_flops)
        }
        Command::Assemble { path, from } => stages::run_assemble(&cfg, &path, from),
        Command::Eval { path, model } => stages::run_eval(&cfg, path.as_deref(), model),
        Command::Gradcheck => stages::run_gradcheck(&cfg),
    }
}
