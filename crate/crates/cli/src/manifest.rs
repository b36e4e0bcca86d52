//! Run manifest written next to every output set.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Serialize)]
pub struct InputFile {
    pub path: PathBuf,
    /// SHA-256 of the file content; absent for directories.
    pub sha256: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub anevrix: &'static str,
    pub manifest_format: u32,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<PathBuf>,
    pub config_hash: String,
    pub seed: u64,
    pub jobs: usize,
    pub versions: Versions,
    pub config: PipelineConfig,
    pub finished_unix: u64,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Collects inputs and outputs while a subcommand runs.
#[derive(Debug, Default)]
pub struct RunLog {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunLog {
    pub fn input(&mut self, p: impl Into<PathBuf>) {
        let p = p.into();
        if !self.inputs.contains(&p) {
            self.inputs.push(p);
        }
    }

    /// Writes `bytes` to `path`, creating parent directories.
    pub fn write(&mut self, path: PathBuf, bytes: impl AsRef<[u8]>) -> CliResult<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.outputs.push(path);
        Ok(())
    }

    pub fn finish(self, command: &str, config: &PipelineConfig, jobs: usize, out_dir: &Path) -> CliResult<PathBuf> {
        let inputs = self
            .inputs
            .into_iter()
            .map(|p| {
                let sha256 = if p.is_file() { Some(sha256_file(&p)?) } else { None };
                Ok(InputFile { path: p, sha256 })
            })
            .collect::<CliResult<Vec<_>>>()?;
        let manifest = RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            inputs,
            outputs: self.outputs,
            config_hash: config.hash(),
            seed: config.seed,
            jobs,
            versions: Versions {
                anevrix: env!("CARGO_PKG_VERSION"),
                manifest_format: 1,
            },
            config: config.clone(),
            finished_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        let path = out_dir.join(format!("{command}.manifest.json"));
        fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
