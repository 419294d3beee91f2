//! Output files and the run manifest that records them.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize)]
struct OutputRecord {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    args: &'a [String],
    config_hash: &'a str,
    seed: u64,
    threads: usize,
    started: String,
    finished: String,
    outputs: Vec<OutputRecord>,
    diagnostics: serde_json::Value,
}

pub struct RunOutput {
    dir: PathBuf,
    command: String,
    args: Vec<String>,
    config_hash: String,
    seed: u64,
    threads: usize,
    started: String,
    written: Vec<PathBuf>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{:02x}", b)).collect()
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunOutput {
    pub fn create(dir: &Path, command: &str, config_hash: String, seed: u64, threads: usize) -> Result<Self, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::input(format!("cannot create output directory {}: {}", dir.display(), e)))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config_hash,
            seed,
            threads,
            started: now(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Header comment pointing at the manifest; carries no timestamps so
    /// reruns stay byte-identical.
    fn manifest_line(&self) -> String {
        format!("# manifest: {} command={} config={}\n", MANIFEST_FILE, self.command, &self.config_hash[..16])
    }

    pub fn write_csv<R: Serialize>(&mut self, name: &str, rows: &[R]) -> Result<PathBuf, CliError> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        for row in rows {
            writer.serialize(row)?;
        }
        let body = writer.into_inner().map_err(|e| CliError::internal(e.to_string()))?;
        let mut bytes = self.manifest_line().into_bytes();
        bytes.extend_from_slice(&body);
        self.write_bytes(name, &bytes)
    }

    /// CSV with an explicit header, for rows whose shape is not a struct.
    pub fn write_table(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf, CliError> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(header)?;
        for row in rows {
            writer.write_record(row)?;
        }
        let body = writer.into_inner().map_err(|e| CliError::internal(e.to_string()))?;
        let mut bytes = self.manifest_line().into_bytes();
        bytes.extend_from_slice(&body);
        self.write_bytes(name, &bytes)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<PathBuf, CliError> {
        self.write_bytes(name, text.as_bytes())
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        let mut file = fs::File::create(&path)?;
        file.write_all(bytes)?;
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn finish(self, diagnostics: serde_json::Value) -> Result<(), CliError> {
        let outputs = self
            .written
            .iter()
            .map(|p| {
                Ok(OutputRecord {
                    path: p.display().to_string(),
                    sha256: sha256_hex(&fs::read(p)?),
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let manifest = Manifest {
            command: &self.command,
            args: &self.args,
            config_hash: &self.config_hash,
            seed: self.seed,
            threads: self.threads,
            started: self.started.clone(),
            finished: now(),
            outputs,
            diagnostics,
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::internal(e.to_string()))?;
        fs::write(self.dir.join(MANIFEST_FILE), json + "\n")?;
        Ok(())
    }
}

/// Reads a CSV written by [`RunOutput`], skipping `#` comment lines.
pub fn read_csv_records(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("cannot read {}: {}", path.display(), e)))?;
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{}\n", l))
        .collect();
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| CliError::input(format!("{}: {}", path.display(), e)))?
        .iter()
        .map(String::from)
        .collect();
    let rows = reader
        .records()
        .map(|r| {
            r.map(|rec| rec.iter().map(String::from).collect())
                .map_err(|e| CliError::input(format!("{}: {}", path.display(), e)))
        })
        .collect::<Result<_, _>>()?;
    Ok((header, rows))
}
