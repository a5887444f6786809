//! Run manifests, path resolution and exit codes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_USAGE: u8 = 64;

/// Failure with an explicit exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

pub fn usage(message: impl Into<String>) -> anyhow::Error {
    Failure { code: EXIT_USAGE, message: message.into() }.into()
}

pub fn invalid(message: impl Into<String>) -> anyhow::Error {
    Failure { code: EXIT_VALIDATION, message: message.into() }.into()
}

/// Exit code for an error: explicit codes win, then any I/O cause maps to 3,
/// everything else is a validation failure.
pub fn exit_code(err: &anyhow::Error) -> ExitCode {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return ExitCode::from(f.code);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ExitCode::from(EXIT_IO);
        }
        if let Some(p) = cause.downcast_ref::<lac_core::pool::PoolError>() {
            return ExitCode::from(if p.is_io() { EXIT_IO } else { EXIT_VALIDATION });
        }
    }
    ExitCode::from(EXIT_VALIDATION)
}

/// Prefixes relative paths with `LAC_DATA_DIR` when set.
pub fn resolve(path: &Path) -> PathBuf {
    match std::env::var_os("LAC_DATA_DIR") {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Option<String>,
    pub seed: u64,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
    pub wall_time_secs: f64,
    pub git_revision: Option<String>,
}

pub struct RunRecorder {
    started: Instant,
    manifest: RunManifest,
}

impl RunRecorder {
    pub fn new(command: &str, seed: u64, config: Option<&Path>) -> Self {
        Self {
            started: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                args: std::env::args().skip(1).collect(),
                config: config.map(|p| p.display().to_string()),
                seed,
                inputs: Vec::new(),
                outputs: Vec::new(),
                wall_time_secs: 0.0,
                git_revision: None,
            },
        }
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        let sha256 = sha256_file(path)?;
        self.manifest.inputs.push(InputHash { path: path.display().to_string(), sha256 });
        Ok(())
    }

    /// Hashes the manifest and every split table of a pool directory.
    pub fn pool_inputs(&mut self, dir: &Path) -> anyhow::Result<()> {
        let paths = lac_core::pool::PoolPaths::in_dir(dir);
        self.input(&paths.manifest)?;
        for p in paths.tables.values().filter(|p| p.exists()) {
            self.input(p)?;
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.manifest.seed = seed;
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    /// Writes the manifest to `path` through a temporary file and a rename.
    pub fn finish(mut self, path: &Path) -> anyhow::Result<()> {
        self.manifest.wall_time_secs = self.started.elapsed().as_secs_f64();
        self.manifest.git_revision = git_revision();
        let mut json = serde_json::to_string_pretty(&self.manifest)?;
        json.push('\n');
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, json)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

fn git_revision() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string()).filter(|s| !s.is_empty())
}

/// Manifest path for a command whose output is a single file.
pub fn manifest_beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".run.json");
    file.with_file_name(name)
}

pub fn ensure_parent(file: &Path) -> std::io::Result<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p),
        _ => Ok(()),
    }
}
