//! Run manifests: what a command was asked to do and what it produced.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};
use sscq::SscqConfig;

use crate::commands::CliError;

#[derive(Debug, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub cli_version: String,
    pub command: String,
    pub args: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<SscqConfig>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| sscq::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Every regular file under `dir`, sorted.
pub fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = fs::read_dir(&d) else {
            continue;
        };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

pub struct Recorder {
    manifest: RunManifest,
}

impl Recorder {
    pub fn start(command: &str, argv: &[String]) -> Self {
        Self {
            manifest: RunManifest {
                cli_version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                args: argv.iter().skip(1).cloned().collect(),
                seed: None,
                started_unix: now(),
                finished_unix: 0,
                inputs: Vec::new(),
                outputs: Vec::new(),
                config: None,
            },
        }
    }

    pub fn seed(&mut self, seed: u64) {
        self.manifest.seed = Some(seed);
    }

    pub fn config(&mut self, config: &SscqConfig) {
        self.manifest.config = Some(config.clone());
    }

    fn hash_into(list: &mut Vec<FileHash>, path: &Path) -> Result<(), CliError> {
        list.push(FileHash {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        if path.is_dir() {
            for f in files_under(path) {
                Self::hash_into(&mut self.manifest.inputs, &f)?;
            }
            Ok(())
        } else {
            Self::hash_into(&mut self.manifest.inputs, path)
        }
    }

    pub fn output(&mut self, path: &Path) -> Result<(), CliError> {
        if path.is_dir() {
            for f in files_under(path) {
                Self::hash_into(&mut self.manifest.outputs, &f)?;
            }
            Ok(())
        } else {
            Self::hash_into(&mut self.manifest.outputs, path)
        }
    }

    /// Writes the manifest to `path`.
    pub fn finish(mut self, path: &Path) -> Result<(), CliError> {
        self.manifest.finished_unix = now();
        let text = toml::to_string(&self.manifest)
            .map_err(|e| CliError::Usage(format!("cannot serialize run manifest: {e}")))?;
        fs::write(path, text).map_err(|e| {
            sscq::Error::Io {
                path: path.to_path_buf(),
                source: e,
            }
            .into()
        })
    }
}

/// `<file>.manifest.toml` next to a file output.
pub fn beside(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.toml");
    path.with_file_name(name)
}
