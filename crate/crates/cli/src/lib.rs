//! Experiment runner: reads a JSON configuration, runs one task and writes
//! CSV and JSON artifacts plus a manifest into an output directory.

pub mod config;
mod tasks;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::Config;

/// Failure of a run, mapped onto the process exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{0}")]
    Library(#[from] levy_bsde::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("no convergence: {0}")]
    NotConverged(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) | CliError::Io(_) => 2,
            CliError::Library(e) => match e {
                levy_bsde::Error::Numerical { .. } => 3,
                _ => 2,
            },
            CliError::NotConverged(_) => 3,
            CliError::Verification(_) => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Simulate,
    Solve,
    Verify,
    Malliavin,
    Hlimit,
    Pdie,
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "simulate" => Task::Simulate,
            "solve" => Task::Solve,
            "verify" => Task::Verify,
            "malliavin" => Task::Malliavin,
            "hlimit" => Task::Hlimit,
            "pdie" => Task::Pdie,
            _ => return Err(format!("unknown task {s:?}; expected simulate, solve, verify, malliavin, hlimit or pdie")),
        })
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).map_err(|_| fmt::Error)?;
        f.write_str(s.as_str().unwrap_or_default())
    }
}

/// Record of one run. Contains no timestamps so that repeated runs produce
/// identical files.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub task: Task,
    pub seed: u64,
    pub config_sha256: String,
    pub version: String,
    pub tolerances: serde_json::Value,
    pub outputs: Vec<String>,
    pub status: String,
}

/// Artifacts written by a task and the outcome to report.
pub(crate) struct TaskOutput {
    pub outputs: Vec<String>,
    pub tolerances: serde_json::Value,
    pub outcome: Result<(), CliError>,
}

pub struct RunOptions {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub task: Task,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<String, CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Invalid(e.to_string()))?;
    fs::write(dir.join(name), text + "\n")?;
    Ok(name.to_string())
}

/// Runs one task. Artifacts and the manifest are written even when the
/// task ends in non-convergence or a failed verification.
pub fn run(opts: &RunOptions) -> Result<Manifest, CliError> {
    let bytes = fs::read(&opts.config).map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", opts.config.display())))?;
    let text = String::from_utf8(bytes.clone()).map_err(|_| CliError::Invalid("config is not UTF-8".into()))?;
    let cfg = Config::parse(&text)?;
    let seed = opts.seed.or(cfg.seed).unwrap_or(0);
    fs::create_dir_all(&opts.out)?;
    let out = tasks::dispatch(opts.task, &cfg, seed, &opts.out)?;
    let manifest = Manifest {
        task: opts.task,
        seed,
        config_sha256: sha256_hex(&bytes),
        version: env!("CARGO_PKG_VERSION").to_string(),
        tolerances: out.tolerances,
        outputs: out.outputs,
        status: match &out.outcome {
            Ok(()) => "ok".into(),
            Err(e) => e.to_string(),
        },
    };
    write_json(&opts.out, "manifest.json", &manifest)?;
    out.outcome.map(|()| manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Invalid("x".into()).exit_code(), 2);
        assert_eq!(CliError::Library(levy_bsde::Error::Config("x".into())).exit_code(), 2);
        let num = levy_bsde::Error::Numerical {
            location: "a".into(),
            message: "b".into(),
        };
        assert_eq!(CliError::Library(num).exit_code(), 3);
        assert_eq!(CliError::NotConverged("x".into()).exit_code(), 3);
        assert_eq!(CliError::Verification("x".into()).exit_code(), 4);
    }

    #[test]
    fn task_names_round_trip() {
        for name in ["simulate", "solve", "verify", "malliavin", "hlimit", "pdie"] {
            assert_eq!(name.parse::<Task>().unwrap().to_string(), name);
        }
        assert!("fit".parse::<Task>().is_err());
    }

    #[test]
    fn sha256_known_value() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
