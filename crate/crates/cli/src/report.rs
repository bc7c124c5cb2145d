use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};
use stochctl::budget::Limits;

use crate::error::{io_err, CliError};

#[derive(Debug, Serialize)]
pub struct Header {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub execution: stochctl::Execution,
    pub limits: Limits,
    /// Seconds since the Unix epoch; the only field that varies between
    /// identical runs.
    pub generated_at: u64,
}

#[derive(Debug, Serialize)]
pub struct Report<T: Serialize> {
    pub header: Header,
    pub verdict: String,
    pub result: T,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn header(
    command: &str,
    config_bytes: &[u8],
    seed: u64,
    execution: stochctl::Execution,
) -> Header {
    Header {
        tool: "stochctl",
        version: env!("CARGO_PKG_VERSION"),
        command: command.into(),
        config_sha256: sha256_hex(config_bytes),
        seed,
        execution,
        limits: stochctl::budget::limits(),
        generated_at: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    }
}

/// Output directory that is created on demand.
pub struct OutDir(pub PathBuf);

impl OutDir {
    pub fn prepare(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Self(dir.to_path_buf()))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        let mut text =
            serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    pub fn write_with<F>(&self, name: &str, f: F) -> Result<PathBuf, CliError>
    where
        F: FnOnce(&mut std::io::BufWriter<std::fs::File>) -> std::io::Result<()>,
    {
        use std::io::Write;
        let path = self.path(name);
        let file = std::fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        let mut w = std::io::BufWriter::new(file);
        f(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}
