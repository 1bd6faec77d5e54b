//! Run manifests and CSV plumbing. Every command that writes files records
//! its inputs in `manifest.json` first; the CSVs it then writes name that
//! manifest by a fingerprint of the deterministic inputs only, so reruns
//! with different worker counts or wall-clock still fingerprint the same.

use std::fs;
use std::path::{Path, PathBuf};

use percolab_core::wire;
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: String,
    pub seed: u64,
    pub replicas: u64,
    pub out_dir: String,
    pub artifact_versions: Value,
    /// RFC 3339 creation time; omitted under --no-timestamp.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub created: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub replica_seeds: Value,
    /// The fingerprinted core: everything the outputs depend on.
    pub deterministic: Value,
    pub fingerprint: String,
}

impl RunManifest {
    /// `params` carries the command-specific knobs (experiment id, mode,
    /// level, eps, ...). `config_json` is the full parsed configuration, so
    /// the fingerprint tracks content, not the path it came from.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        command: &str,
        config_path: &Path,
        config_json: Value,
        seed: u64,
        replicas: u64,
        out_dir: &Path,
        workers: Option<usize>,
        params: Value,
        timestamp: bool,
    ) -> RunManifest {
        let deterministic = json!({
            "command": command,
            "config": config_json,
            "seed": seed,
            "replicas": replicas,
            "params": params,
        });
        let bytes = serde_json::to_vec(&deterministic).expect("manifest core serializes");
        let fingerprint = format!("{:016x}", wire::fnv1a(&bytes));
        let head: Vec<u64> = (0..replicas.min(16))
            .map(|r| percolab_core::replica_seed(seed, r))
            .collect();
        RunManifest {
            command: command.into(),
            config_path: config_path.display().to_string(),
            seed,
            replicas,
            out_dir: out_dir.display().to_string(),
            artifact_versions: json!({
                "percolab": env!("CARGO_PKG_VERSION"),
                "tree_format": "PERC1",
                "csv_schema": 1,
            }),
            created: timestamp.then(|| chrono::Utc::now().to_rfc3339()),
            workers,
            replica_seeds: json!({
                "derivation": "replica r runs with seed = replica_seed(master, r)",
                "count": replicas,
                "head": head,
            }),
            deterministic,
            fingerprint,
        }
    }

    /// Write `manifest.json` into `dir`, creating the directory. Call this
    /// before writing any other output.
    pub fn write(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }
}

/// A CSV document with the versioned comment preamble. Rows are plain
/// comma-joined strings; values never contain commas here.
pub struct CsvDoc {
    lines: Vec<String>,
}

impl CsvDoc {
    pub fn new(fingerprint: &str, timestamp: bool) -> CsvDoc {
        let mut lines = vec!["#schema=1".to_string(), format!("#manifest={fingerprint}")];
        if timestamp {
            lines.push(format!("#created={}", chrono::Utc::now().to_rfc3339()));
        }
        CsvDoc { lines }
    }

    pub fn raw(&mut self, line: impl Into<String>) {
        self.lines.push(line.into());
    }

    pub fn row<S: AsRef<str>>(&mut self, cells: &[S]) {
        self.lines
            .push(cells.iter().map(|c| c.as_ref()).collect::<Vec<_>>().join(","));
    }

    pub fn render(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }
}

/// Full-precision decimal for CSV cells: round-trips through parse.
pub fn num(x: f64) -> String {
    if x.is_finite() {
        x.to_string()
    } else {
        String::from("nan")
    }
}
