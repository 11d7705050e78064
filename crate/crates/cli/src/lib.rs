//! Command-line driver: corpus generation, training, evaluation, oracle
//! comparison and self-test.

// Range checks are written as `!(x <= tol)` so that NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod selftest;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use error::{CliError, Result};

use config::RewardKind;

#[derive(Debug, Parser)]
#[command(name = "ratectl", version, about = "Learned rate control on a synthetic encoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic video corpus.
    GenCorpus(GenCorpusArgs),
    /// Train an agent from a run config.
    Train(TrainArgs),
    /// Sweep policies over a corpus and compare them.
    Evaluate(EvaluateArgs),
    /// Solve short videos exhaustively and measure a policy's gap.
    Oracle(OracleArgs),
    /// Run the built-in correctness checks.
    Selftest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 3 to 6 frames at 1 fps, solvable by the exhaustive oracle.
    Desk,
    /// 3 to 7 seconds at 30 fps.
    Full,
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// 1 runs actor and learner in lockstep, reproducibly.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub reward: Option<RewardKind>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Comma-separated training targets in kbps.
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<f64>>,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Stop after this many learner steps even if the config asks for more.
    #[arg(long)]
    pub until: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Agent checkpoint as `[LABEL=]PATH`; repeat a label to pool seeds.
    #[arg(long)]
    pub checkpoint: Vec<String>,
    /// Baseline policies: `heuristic-vbr`, `constant-qp-N`.
    #[arg(long, value_delimiter = ',', default_value = "heuristic-vbr")]
    pub baseline: Vec<String>,
    /// Label of the policy every other one is compared with.
    #[arg(long, default_value = "heuristic-vbr")]
    pub reference: String,
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Run search when acting instead of reading the policy head.
    #[arg(long)]
    pub search: bool,
    /// Simulations per move with `--search`.
    #[arg(long)]
    pub simulations: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub targets: Option<Vec<f64>>,
    /// Policy to measure: `heuristic-vbr`, `constant-qp-N` or `oracle`.
    #[arg(long)]
    pub policy: Option<String>,
    /// Agent checkpoint to measure instead of a named policy.
    #[arg(long, conflicts_with = "policy")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<u8>>,
    #[arg(long)]
    pub max_frames: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` and runs the command, writing progress to `out`. Returns
/// the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code() as u8;
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(&a, out),
        Command::Train(a) => commands::train(&a, out),
        Command::Evaluate(a) => commands::evaluate(&a, out),
        Command::Oracle(a) => commands::oracle(&a, out),
        Command::Selftest => {
            let corruption = match std::env::var(selftest::CORRUPT_ENV).as_deref() {
                Ok("reward") => selftest::Corruption::Reward,
                _ => selftest::Corruption::None,
            };
            let failed = selftest::report(corruption, out);
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::Check(failed.join(", ")))
            }
        }
    }
}
