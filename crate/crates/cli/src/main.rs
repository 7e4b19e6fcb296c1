//! `lumina`: synthesize, decompose and score multi-view image sets.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod decompose;
mod eval;
mod exit;
mod gradcheck;
mod synth;

use exit::Failure;

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(name = "lumina", version, about = "Highlight, albedo and shading separation for multi-view image sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic set with ground-truth layers.
    Synth(synth::SynthArgs),
    /// Decompose a set directory into layers.
    Decompose(decompose::DecomposeArgs),
    /// Score decomposed layers against ground truth.
    Eval(eval::EvalArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(gradcheck::GradcheckArgs),
}

/// Output directory shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct OutDir {
    /// Directory receiving all outputs; created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

const THREADS_VAR: &str = "LUMINA_THREADS";

fn init_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Failure::usage(format!("{THREADS_VAR} must be a non-negative integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(format!("cannot size thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Synth(a) => synth::run(a),
        Command::Decompose(a) => decompose::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Gradcheck(a) => gradcheck::run(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("lumina: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
