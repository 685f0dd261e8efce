use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::Serialize;

/// What ran, with which inputs and seeds, and what it wrote.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub tool_version: &'static str,
    pub config_paths: Vec<PathBuf>,
    pub seeds: Vec<u64>,
    pub threads: Option<usize>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub outputs: Vec<PathBuf>,
    pub status: String,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

impl RunManifest {
    pub fn start(command: &str, threads: Option<usize>) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            tool_version: env!("CARGO_PKG_VERSION"),
            config_paths: Vec::new(),
            seeds: Vec::new(),
            threads,
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
            outputs: Vec::new(),
            status: "running".into(),
        }
    }

    /// Stamps the end time and writes to `dir/run_manifest.json`, to
    /// `explicit`, or as one line on stderr.
    pub fn finish(mut self, status: &str, dir: Option<&Path>, explicit: Option<&Path>) -> anyhow::Result<()> {
        self.finished_unix_ms = now_ms();
        self.status = status.to_string();
        let target = explicit.map(Path::to_path_buf).or_else(|| dir.map(|d| d.join("run_manifest.json")));
        match target {
            Some(path) => {
                let text = serde_json::to_string_pretty(&self)?;
                std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
            }
            None => {
                eprintln!("{}", serde_json::to_string(&self)?);
                Ok(())
            }
        }
    }
}
