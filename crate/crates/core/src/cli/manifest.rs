use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOSSES_FILE: &str = "losses.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.csv";

pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

/// Record of one command invocation, written as `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub run_id: String,
    /// Run ids of the checkpoints this run consumed.
    pub parent_run_ids: Vec<String>,
    pub config_path: Option<String>,
    pub seed: u64,
    pub version: String,
    pub args: Vec<String>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub out_dir: String,
}

impl RunManifest {
    /// The run id hashes the command, its arguments other than `--out`, the
    /// config text, the seed and the parents, so reruns share an id.
    pub fn start(
        command: &str,
        args: &[String],
        config_path: Option<&Path>,
        config_text: &str,
        seed: u64,
        parent_run_ids: Vec<String>,
        out_dir: &Path,
    ) -> Self {
        let mut h = Sha256::new();
        for part in [command, config_text, &seed.to_string()] {
            h.update(part.as_bytes());
            h.update([0]);
        }
        let mut skip = false;
        let hashed = args.iter().filter(|a| {
            let keep = !skip && *a != "--out" && !a.starts_with("--out=");
            skip = *a == "--out";
            keep
        });
        for a in hashed.chain(&parent_run_ids) {
            h.update(a.as_bytes());
            h.update([0]);
        }
        let digest = h.finalize();
        let run_id = digest[..8].iter().map(|b| format!("{b:02x}")).collect::<String>();
        Self {
            command: command.to_string(),
            run_id: format!("{command}-{run_id}"),
            parent_run_ids,
            config_path: config_path.map(|p| p.display().to_string()),
            seed,
            version: version_string(),
            args: args.to_vec(),
            started_at: now(),
            finished_at: None,
            out_dir: out_dir.display().to_string(),
        }
    }

    pub fn finish(&mut self) {
        self.finished_at = Some(now());
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Creates a fresh output directory; an existing path is refused.
pub fn create_out_dir(dir: &Path) -> std::result::Result<PathBuf, String> {
    if dir.exists() {
        return Err(format!(
            "output directory {} already exists; refusing to overwrite a previous run",
            dir.display()
        ));
    }
    fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    Ok(dir.to_path_buf())
}
