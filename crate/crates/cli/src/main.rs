//! `maxmatch`: train, evaluate, bound and inspect worst-case consistency runs.

mod bound;
mod converge;
mod error;
mod eval;
mod manifest;
mod preview;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use maxmatch_core::selfcheck;

use crate::error::{CliError, CliResult};
use crate::manifest::{emit, OUT_ROOT_ENV};

#[derive(Debug, Parser)]
#[command(
    name = "maxmatch",
    version,
    about = "Worst-case consistency semi-supervised learning lab"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Suppress progress output on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    /// Parent directory for outputs when `--out` is not given.
    #[arg(long, global = true, env = OUT_ROOT_ENV, default_value = "runs")]
    pub out_root: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write metrics, snapshots and a manifest.
    Train(train::TrainArgs),
    /// Error rates of a snapshot (and its EMA) on a dataset split.
    Eval(eval::EvalArgs),
    /// Evaluate the generalization bound and its terms.
    Bound(bound::BoundArgs),
    /// Run the synthetic minimax convergence experiment.
    Converge(converge::ConvergeArgs),
    /// Render weak and strong views of a few samples.
    AugmentPreview(preview::PreviewArgs),
    /// Run the built-in numerical checks.
    Selfcheck,
}

fn selfcheck(quiet: bool) -> CliResult<()> {
    let outcomes = selfcheck::run_all();
    for o in &outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        if quiet {
            emit(&format!("{status} {}", o.name))?;
        } else {
            emit(&format!("{status} {}: {}", o.name, o.detail))?;
        }
    }
    match outcomes.iter().filter(|o| !o.passed).count() {
        0 => Ok(()),
        n => Err(CliError::ChecksFailed(n)),
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Train(a) => train::run(a, g),
        Command::Eval(a) => eval::run(a),
        Command::Bound(a) => bound::run(a, g.quiet),
        Command::Converge(a) => converge::run(a, g),
        Command::AugmentPreview(a) => preview::run(a, g),
        Command::Selfcheck => selfcheck(g.quiet),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::from(error::EXIT_OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
