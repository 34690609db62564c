use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use ddspme_cli::config::Task;
use ddspme_cli::{resolve_threads, run, RunOptions};

/// Distribution-dependent SPDE laboratory.
#[derive(Debug, Parser)]
#[command(name = "ddspme", version)]
struct Args {
    /// solve | picard-diagnose | sweep-lambda | sweep-epsilon |
    /// probe-assumptions | apriori | oracle-ot | validate
    task: Task,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with status 4 when an assumption probe fails.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(n) = resolve_threads(args.threads) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not size thread pool: {e}");
        }
    }
    let code = run(&RunOptions {
        task: args.task,
        config: args.config,
        out: args.out,
        strict: args.strict,
    });
    ExitCode::from(code as u8)
}
