//! Atomic artifact writes and run manifests.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

/// Writes `contents` to a temporary file next to `path`, then renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub iterations: usize,
    pub seconds_per_iteration: f64,
    /// Environment transitions consumed.
    pub datapoints: usize,
    /// Models produced (trained policies or evaluated k-shot agents).
    pub models: usize,
    pub seconds_per_model: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<String>,
    pub status: String,
    pub error: Option<String>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub timing: Option<Timing>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Tracks one subcommand's manifest. The manifest is written as soon as the
/// run is opened and rewritten when it closes.
pub struct Run {
    pub manifest: RunManifest,
    path: PathBuf,
    pub out_dir: PathBuf,
    started: Instant,
}

impl Run {
    pub fn open(command: &str, config: &RunConfig) -> Result<Self, CliError> {
        let out_dir = config.out_dir.clone();
        let manifest = RunManifest {
            tool: "taskdistill".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: config.clone(),
            inputs: BTreeMap::new(),
            seeds: BTreeMap::from([("master".to_string(), config.seed)]),
            artifacts: Vec::new(),
            status: "running".into(),
            error: None,
            started_unix: unix_now(),
            finished_unix: None,
            timing: None,
        };
        let run = Self {
            path: out_dir.join(format!("{command}.manifest.json")),
            manifest,
            out_dir,
            started: Instant::now(),
        };
        Ok(run)
    }

    pub fn seed(&mut self, stage: &str, seed: u64) -> u64 {
        self.manifest.seeds.insert(stage.into(), seed);
        seed
    }

    pub fn input(&mut self, name: &str, value: &Path) {
        self.manifest.inputs.insert(name.into(), value.display().to_string());
    }

    /// Writes the manifest in its initial state.
    pub fn start(&self) -> Result<(), CliError> {
        self.save()
    }

    pub fn elapsed(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    pub fn write(&mut self, name: &str, contents: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.out_dir.join(name);
        write_atomic(&path, contents)?;
        if !self.manifest.artifacts.iter().any(|a| a == name) {
            self.manifest.artifacts.push(name.into());
        }
        Ok(path)
    }

    pub fn finish(&mut self, status: &str, error: Option<String>, timing: Option<Timing>) -> Result<(), CliError> {
        self.manifest.status = status.into();
        self.manifest.error = error;
        self.manifest.finished_unix = Some(unix_now());
        self.manifest.timing = timing;
        self.save()
    }

    fn save(&self) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        text.push('\n');
        write_atomic(&self.path, text.as_bytes())
    }
}

pub fn load_manifest(path: &Path) -> Result<RunManifest, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}
