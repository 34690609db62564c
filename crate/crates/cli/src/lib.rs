//! Batch driver for the ddspme laboratory.
//!
//! [`run`] takes a task, a config path and an output directory, and returns
//! the process exit code. Each run leaves `manifest.json` in the output
//! directory, plus `error.json` when it fails.

pub mod config;
pub mod error;
pub mod manifest;
pub mod tasks;

use std::path::{Path, PathBuf};

use config::{ExperimentConfig, SeedProvenance, Task};
use error::CliError;
use manifest::ManifestWriter;
use tasks::{dispatch, validation_report, Context};

pub const DEFAULT_OUT: &str = "ddspme-out";

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub task: Task,
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub strict: bool,
}

fn out_dir(opts: &RunOptions, config: Option<&ExperimentConfig>) -> PathBuf {
    opts.out
        .clone()
        .or_else(|| config.and_then(|c| c.output.as_ref()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn empty_seeds() -> SeedProvenance {
    SeedProvenance {
        run_seed: 0,
        noise_seed: 0,
        init_seed: 0,
        probe_seed: 0,
    }
}

fn fail(mut writer: ManifestWriter, err: &CliError) -> i32 {
    let code = err.exit_code();
    let record = serde_json::to_string_pretty(&err.record()).expect("error record serializes");
    if writer.write("error.json", record).is_err() {
        eprintln!("could not write error.json");
    }
    let _ = writer.finish(code);
    code
}

/// Runs one task end to end and returns the exit code.
pub fn run(opts: &RunOptions) -> i32 {
    let threads = rayon::current_num_threads();
    let parsed = ExperimentConfig::load(&opts.config);
    let dir = out_dir(opts, parsed.as_ref().ok());
    let (hash, seeds) = match &parsed {
        Ok(c) => (c.hash(opts.task), c.seeds()),
        Err(_) => (String::new(), empty_seeds()),
    };
    let mut writer = match ManifestWriter::begin(&dir, hash, opts.task.name(), threads, seeds) {
        Ok(w) => w,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let config = match parsed {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return fail(writer, &e);
        }
    };

    if opts.task == Task::Validate {
        let report = validation_report(&config, Task::Validate);
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        if let Err(e) = writer.write("validation.json", text) {
            return fail(writer, &e);
        }
        for v in &report.violations {
            eprintln!("violation: {v}");
        }
        let code = if report.valid { 0 } else { 2 };
        let _ = writer.finish(code);
        return code;
    }

    let violations = config.violations(opts.task);
    if !violations.is_empty() {
        let e = CliError::Schema(violations);
        eprintln!("error: {e}");
        return fail(writer, &e);
    }
    let result = config
        .operator
        .build()
        .map_err(CliError::from)
        .and_then(|op| {
            let ctx = Context { config: &config, op, strict: opts.strict };
            dispatch(opts.task, &ctx, &mut writer)
        });
    match result {
        Ok(()) => match writer.finish(0) {
            Ok(_) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        Err(e) => {
            eprintln!("error: {e}");
            fail(writer, &e)
        }
    }
}

/// Threads from the flag, then `DDSPME_THREADS`, else rayon's default.
pub fn resolve_threads(flag: Option<usize>) -> Option<usize> {
    flag.or_else(|| std::env::var("DDSPME_THREADS").ok().and_then(|v| v.trim().parse().ok()))
        .filter(|&n| n > 0)
}

/// Reads a finished manifest.
pub fn read_manifest(dir: &Path) -> Result<manifest::RunManifest, CliError> {
    let text = std::fs::read_to_string(dir.join(manifest::MANIFEST_FILE))?;
    serde_json::from_str(&text).map_err(|e| CliError::Io(e.to_string()))
}
