//! Output directory bookkeeping. Every file written through [`Outputs`] is
//! listed with its digest in `provenance.json`, next to the digest of the
//! resolved config, the seed and the tool version. Nothing time- or
//! host-dependent is recorded, so reruns are byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const PROVENANCE: &str = "provenance.json";

#[derive(Serialize)]
struct Artifact {
    path: String,
    sha256: String,
    bytes: u64,
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a str,
    config_sha256: String,
    artifacts: Vec<Artifact>,
}

pub struct Outputs {
    dir: PathBuf,
    command: &'static str,
    files: Vec<PathBuf>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

impl Outputs {
    pub fn create(dir: &Path, command: &'static str) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command,
            files: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Records a file written by other means (for example a checkpoint).
    pub fn track(&mut self, name: impl Into<PathBuf>) {
        self.files.push(name.into());
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        fs::write(self.dir.join(name), bytes)?;
        self.track(name);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Writes the resolved config and the provenance record; call last.
    pub fn finish<T: Serialize>(mut self, config: &T, seed: u64) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(config)?;
        text.push('\n');
        fs::write(self.dir.join(RESOLVED_CONFIG), &text)?;
        self.files.sort();
        let artifacts = self
            .files
            .iter()
            .map(|f| {
                let full = self.dir.join(f);
                Ok(Artifact {
                    path: f.to_string_lossy().replace('\\', "/"),
                    sha256: sha256_file(&full)?,
                    bytes: fs::metadata(&full)?.len(),
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let record = Provenance {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config: RESOLVED_CONFIG,
            config_sha256: hex::encode(Sha256::digest(text.as_bytes())),
            artifacts,
        };
        let mut p = serde_json::to_string_pretty(&record)?;
        p.push('\n');
        fs::write(self.dir.join(PROVENANCE), p)?;
        Ok(self.dir)
    }
}
