use std::path::Path;
use std::process::Command;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// SHA-256 of the value's JSON form, hex encoded.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serialises");
    hex::encode(Sha256::digest(&json))
}

/// `git describe` of the source tree when available, else the crate version.
pub fn build_id() -> String {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(dir)
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("fedrec-{}", env!("CARGO_PKG_VERSION")))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

#[derive(Serialize)]
pub struct CellRecord {
    pub label: String,
    pub csv: String,
    pub seed: u64,
    pub rounds: usize,
    pub wall_clock_secs: f64,
    pub predictor_stopped_at: Option<usize>,
    pub skipped_rounds: Vec<usize>,
}

#[derive(Serialize)]
pub struct RunManifest<'a, C: Serialize> {
    pub command: &'a str,
    pub config_hash: &'a str,
    pub build: String,
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
    pub config: &'a C,
    pub cells: Vec<CellRecord>,
}
