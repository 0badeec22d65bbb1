mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use modmt::{ErrorKind, LanguageId};

use config::Phases;

#[derive(Parser, Debug)]
#[command(name = "modmt", version, about = "Modular multilingual translation runs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the parameter initialisation seed.
    #[arg(long, global = true)]
    pub seed_init: Option<u64>,
    /// Overrides the data seed.
    #[arg(long, global = true)]
    pub seed_data: Option<u64>,
    /// Overrides the training step limit.
    #[arg(long, global = true)]
    pub max_steps: Option<u64>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the synthetic corpus and its manifest.
    GenCorpus,
    /// Learns vocabularies and jointly trains every scheduled direction.
    InitTrain,
    /// Trains a new language against a frozen anchor.
    AddLanguage {
        /// Checkpoint to extend; `<out>/init.mnmt` by default.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        language: Option<LanguageId>,
        #[arg(long)]
        anchor: Option<LanguageId>,
        #[arg(long, value_enum)]
        direction: Option<Phases>,
    },
    /// Translates lines from a file or standard input.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        src: LanguageId,
        #[arg(long)]
        tgt: LanguageId,
        /// Input file; standard input if absent.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output token limit per sentence.
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Scores every direction between registered languages.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test manifest: a `[files]` table of line-aligned test files.
        /// Without it, the test split of the configured corpus is used.
        #[arg(long)]
        tests: Option<PathBuf>,
        /// Use at most this many test sentences per direction.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Prints the contents of a checkpoint.
    InspectCheckpoint {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also list the digest of every parameter.
        #[arg(long)]
        digests: bool,
    },
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config | ErrorKind::Contract => 1,
        ErrorKind::Data | ErrorKind::Io => 2,
        ErrorKind::Integrity | ErrorKind::Divergence => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage_error = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage_error { 1 } else { 0 });
        }
    };
    let c = &cli.common;
    let result = match cli.command {
        Command::GenCorpus => commands::gen_corpus(c),
        Command::InitTrain => commands::init_train(c),
        Command::AddLanguage {
            checkpoint,
            language,
            anchor,
            direction,
        } => commands::add_language(c, checkpoint, language, anchor, direction),
        Command::Translate {
            checkpoint,
            src,
            tgt,
            input,
            max_len,
        } => commands::translate(&checkpoint, &src, &tgt, input.as_deref(), max_len),
        Command::Evaluate {
            checkpoint,
            tests,
            limit,
        } => commands::evaluate(c, &checkpoint, tests.as_deref(), limit),
        Command::InspectCheckpoint { checkpoint, digests } => commands::inspect(&checkpoint, digests),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
