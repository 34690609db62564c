//! Run manifest: written when a run starts, rewritten when it ends.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::SeedProvenance;
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub artifact_version: String,
    pub task: String,
    pub status: RunStatus,
    pub started_unix: f64,
    pub wall_clock_seconds: Option<f64>,
    pub threads: usize,
    pub seeds: SeedProvenance,
    /// Output files relative to the output directory.
    pub outputs: Vec<String>,
    pub exit_code: Option<i32>,
}

/// Open manifest bound to an output directory.
pub struct ManifestWriter {
    dir: PathBuf,
    manifest: RunManifest,
    clock: Instant,
}

impl ManifestWriter {
    pub fn begin(dir: &Path, config_hash: String, task: &str, threads: usize, seeds: SeedProvenance) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let w = ManifestWriter {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                config_hash,
                artifact_version: env!("CARGO_PKG_VERSION").to_string(),
                task: task.to_string(),
                status: RunStatus::Running,
                started_unix: started,
                wall_clock_seconds: None,
                threads,
                seeds,
                outputs: Vec::new(),
                exit_code: None,
            },
            clock: Instant::now(),
        };
        w.flush()?;
        Ok(w)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes `contents` to `name` inside the output directory and records it.
    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        fs::write(self.dir.join(name), contents)?;
        self.record(name);
        Ok(())
    }

    /// Records a file that was written by other means.
    pub fn record(&mut self, name: &str) {
        if !self.manifest.outputs.iter().any(|o| o == name) {
            self.manifest.outputs.push(name.to_string());
        }
    }

    pub fn finish(mut self, exit_code: i32) -> Result<RunManifest, CliError> {
        self.manifest.status = if exit_code == 0 { RunStatus::Ok } else { RunStatus::Failed };
        self.manifest.exit_code = Some(exit_code);
        self.manifest.wall_clock_seconds = Some(self.clock.elapsed().as_secs_f64());
        self.manifest.outputs.sort();
        self.flush()?;
        Ok(self.manifest)
    }

    fn flush(&self) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| CliError::Io(e.to_string()))?;
        fs::write(self.dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}
