//! Output directory bookkeeping and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_digest: String,
    pub seed: u64,
    /// Output files relative to the output directory.
    pub files: Vec<String>,
    /// Wall time per stage in milliseconds.
    pub stage_ms: BTreeMap<String, u64>,
    /// Distance trace of the main Picard run, if any.
    pub picard_trace: Vec<f64>,
}

/// Writes files into the run directory and records them for the manifest.
pub struct Output {
    dir: PathBuf,
    digest: String,
    files: Vec<String>,
    stages: BTreeMap<String, u64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Output {
    pub fn create(dir: &Path, digest: &str) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Output {
            dir: dir.to_path_buf(),
            digest: digest.to_string(),
            files: Vec::new(),
            stages: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Runs `f` and records its wall time under `name`.
    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        *self.stages.entry(name.to_string()).or_default() += t.elapsed().as_millis() as u64;
        out
    }

    /// CSV with a `# config_digest=…` line, a header, then `rows`.
    pub fn csv(
        &mut self,
        name: &str,
        header: &[&str],
        rows: &[Vec<String>],
    ) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let mut file = std::io::BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
        writeln!(file, "# config_digest={}", self.digest).map_err(io_err(&path))?;
        let mut w = csv::Writer::from_writer(file);
        let csv_err = |e: csv::Error| CliError::Core(e.into());
        w.write_record(header).map_err(csv_err)?;
        for r in rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.flush().map_err(io_err(&path))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Core(e.into()))?;
        fs::write(&path, text + "\n").map_err(io_err(&path))?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Records files written by other code, relative to the run directory.
    pub fn record(&mut self, names: impl IntoIterator<Item = String>) {
        self.files.extend(names);
    }

    /// Writes `manifest.json` after checking that every listed file is non-empty.
    pub fn finish(
        mut self,
        command: &str,
        seed: u64,
        picard_trace: Vec<f64>,
    ) -> Result<RunManifest, CliError> {
        for f in &self.files {
            let p = self.dir.join(f);
            let len = fs::metadata(&p).map_err(io_err(&p))?.len();
            if len == 0 {
                return Err(CliError::Io {
                    path: p,
                    source: std::io::Error::other("output file is empty"),
                });
            }
        }
        self.files.push("manifest.json".into());
        let manifest = RunManifest {
            tool: "mfgrad".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_digest: self.digest.clone(),
            seed,
            files: self.files.clone(),
            stage_ms: self.stages.clone(),
            picard_trace,
        };
        let path = self.dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Core(e.into()))?;
        fs::write(&path, text + "\n").map_err(io_err(&path))?;
        Ok(manifest)
    }
}

/// `{:e}` formatting: shortest round-trip representation.
pub fn num(v: f64) -> String {
    format!("{v:e}")
}

/// Parses a JSON output file with its wall-clock fields (`runtime_ms`,
/// `stage_ms`) removed, for comparing runs.
pub fn without_timings(text: &str) -> serde_json::Result<serde_json::Value> {
    fn strip(v: &mut serde_json::Value) {
        match v {
            serde_json::Value::Object(m) => {
                m.remove("runtime_ms");
                m.remove("stage_ms");
                m.values_mut().for_each(strip);
            }
            serde_json::Value::Array(a) => a.iter_mut().for_each(strip),
            _ => {}
        }
    }
    let mut v: serde_json::Value = serde_json::from_str(text)?;
    strip(&mut v);
    Ok(v)
}
