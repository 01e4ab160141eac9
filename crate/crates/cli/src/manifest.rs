//! Run directories and their manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Job, RunConfig};
use crate::experiments;
use crate::CliError;

pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Serialize, Deserialize)]
pub struct RunInfo {
    pub experiment: String,
    pub started: String,
    pub wall_clock_s: f64,
    pub threads: usize,
    pub seeds: Vec<u64>,
    pub config_sha256: String,
    pub core_version: String,
    pub cli_version: String,
    pub model_format_version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub run: RunInfo,
    /// The resolved config; `difflab run <manifest>` replays it.
    pub config: RunConfig,
    /// sha256 of every artifact, keyed by file name.
    pub checksums: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Run(format!("{}: {e}", path.display()))
}

fn fresh_dir(root: &Path, stem: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
    for k in 0.. {
        let name = if k == 0 { stem.to_string() } else { format!("{stem}-{k}") };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir, e)),
        }
    }
    unreachable!("unbounded search")
}

pub fn checksums(dir: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if name == MANIFEST || !path.is_file() {
            continue;
        }
        let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
        out.insert(name, sha256_hex(&bytes));
    }
    Ok(out)
}

/// Execute `job` into `root/<timestamp>-<config hash>/` and write the manifest.
pub fn run(job: &Job, root: &Path, threads: usize) -> Result<PathBuf, CliError> {
    let config = job.to_config();
    let text = toml::to_string(&config).map_err(|e| CliError::Run(e.to_string()))?;
    let hash = sha256_hex(text.as_bytes());
    let now = chrono::Utc::now();
    let dir = fresh_dir(root, &format!("{}-{}", now.format("%Y%m%dT%H%M%SZ"), &hash[..12]))?;
    let clock = Instant::now();
    experiments::execute(job, &dir)?;
    let manifest = Manifest {
        run: RunInfo {
            experiment: format!("{:?}", job.experiment()).to_lowercase(),
            started: now.to_rfc3339(),
            wall_clock_s: clock.elapsed().as_secs_f64(),
            threads,
            seeds: job.seeds(),
            config_sha256: hash,
            core_version: difflab_core::VERSION.to_string(),
            cli_version: env!("CARGO_PKG_VERSION").to_string(),
            model_format_version: difflab_core::score_match::FORMAT_VERSION,
        },
        config,
        checksums: checksums(&dir)?,
    };
    let path = dir.join(MANIFEST);
    let body = toml::to_string(&manifest).map_err(|e| CliError::Run(e.to_string()))?;
    std::fs::write(&path, body).map_err(|e| io_err(&path, e))?;
    Ok(dir)
}
