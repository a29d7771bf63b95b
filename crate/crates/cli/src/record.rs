use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::{to_json, write_file, CliResult};

/// Provenance of one command invocation. Timestamps live only here, so
/// every other artifact is a pure function of the inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub command: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    /// Input path to SHA-256.
    pub input_digests: BTreeMap<String, String>,
    /// Output path to SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub wall_time_secs: f64,
    pub versions: BTreeMap<String, String>,
}

pub struct Recorder {
    record: RunRecord,
    started: Instant,
}

impl Recorder {
    pub fn start(command: &str, seed: u64) -> Self {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        let mut versions = BTreeMap::new();
        versions.insert("patchsae".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("checkpoint".to_string(), patchsae::model::CHECKPOINT_VERSION.to_string());
        versions.insert("shard".to_string(), patchsae::store::SHARD_VERSION.to_string());
        Recorder {
            record: RunRecord {
                run_id: format!("{command}-{:x}-{:x}", now.as_nanos(), std::process::id()),
                command: command.to_string(),
                seed,
                config_digest: None,
                input_digests: BTreeMap::new(),
                outputs: BTreeMap::new(),
                started_unix: now.as_secs(),
                wall_time_secs: 0.0,
                versions,
            },
            started: Instant::now(),
        }
    }

    pub fn config(&mut self, text: &str) {
        self.record.config_digest = Some(patchsae::store::hex_digest(text.as_bytes()));
    }

    pub fn input(&mut self, path: &Path, digest: String) {
        self.record.input_digests.insert(path.display().to_string(), digest);
    }

    pub fn input_file(&mut self, path: &Path) -> CliResult<String> {
        let digest = patchsae::store::file_digest(path)?;
        self.input(path, digest.clone());
        Ok(digest)
    }

    pub fn input_dataset(&mut self, manifest: &Path) -> CliResult<String> {
        let digest = patchsae::store::dataset_digest(manifest)?;
        self.input(manifest, digest.clone());
        Ok(digest)
    }

    /// Records an output already on disk.
    pub fn output(&mut self, path: &Path) -> CliResult<String> {
        let digest = patchsae::store::file_digest(path)?;
        self.record.outputs.insert(path.display().to_string(), digest.clone());
        Ok(digest)
    }

    /// Writes `text` to `path` and records it.
    pub fn write(&mut self, path: &Path, contents: impl AsRef<[u8]>) -> CliResult<String> {
        write_file(path, contents)?;
        self.output(path)
    }

    /// Writes `run.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> CliResult<(PathBuf, RunRecord)> {
        self.record.wall_time_secs = self.started.elapsed().as_secs_f64();
        let path = dir.join("run.json");
        write_file(&path, to_json(&self.record))?;
        Ok((path, self.record))
    }
}
