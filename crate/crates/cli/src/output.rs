//! Output files stamped with the run manifest hash.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::Experiment;
use crate::error::CliError;

/// Identity of a run: command, tool version and resolved configuration.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub command: String,
    pub sha256: String,
    config: Value,
    dir: PathBuf,
    files: Vec<String>,
}

impl Manifest {
    /// The hash ignores the output directory so that relocated runs share it.
    pub fn new(command: &str, exp: &Experiment) -> Result<Self, CliError> {
        let mut config = serde_json::to_value(exp)?;
        let mut hashed = config.clone();
        if let Some(obj) = hashed.as_object_mut() {
            obj.remove("outputs");
        }
        let ident = json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "config": hashed,
        });
        let digest = Sha256::digest(serde_json::to_vec(&ident)?);
        let sha256 = digest.iter().map(|b| format!("{b:02x}")).collect();
        if let Some(obj) = config.as_object_mut() {
            obj.insert("outputs".into(), json!(exp.outputs.display().to_string()));
        }
        std::fs::create_dir_all(&exp.outputs)?;
        Ok(Manifest {
            command: command.to_string(),
            sha256,
            config,
            dir: exp.outputs.clone(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// First line of every CSV output.
    pub fn header_line(&self) -> String {
        format!("# manifest_sha256={}", self.sha256)
    }

    /// Creates `name` under the output directory and writes the header line.
    pub fn create_csv(&mut self, name: &str) -> Result<BufWriter<File>, CliError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "{}", self.header_line())?;
        self.files.push(name.to_string());
        Ok(w)
    }

    /// Writes `value` as pretty JSON with the manifest hash inserted.
    pub fn write_json(&mut self, name: &str, mut value: Value) -> Result<(), CliError> {
        if let Some(obj) = value.as_object_mut() {
            obj.insert("manifest_sha256".into(), json!(self.sha256));
        }
        let mut w = BufWriter::new(File::create(self.dir.join(name))?);
        serde_json::to_writer_pretty(&mut w, &value)?;
        writeln!(w)?;
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Writes `manifest.json` listing every file produced.
    pub fn finish(&self, elapsed: Duration, workers: usize) -> Result<(), CliError> {
        let value = json!({
            "manifest_sha256": self.sha256,
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "config": self.config,
            "workers": workers,
            "elapsed_seconds": elapsed.as_secs_f64(),
            "files": self.files,
        });
        let mut w = BufWriter::new(File::create(self.dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut w, &value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

/// Body of a stamped CSV file, without the manifest line.
pub fn csv_body(text: &str) -> &str {
    match text.strip_prefix("# manifest_sha256=") {
        Some(rest) => rest.split_once('\n').map(|(_, b)| b).unwrap_or(""),
        None => text,
    }
}
