//! Reproducibility record left behind by every command.
//!
//! The manifest is a single JSON object on one line, written to
//! `manifest.json` in the command's output directory. It names the resolved
//! command line, the inputs that picked the run (scenario directory, seed,
//! controller, checkpoint) and a sha256 of every file the command produced,
//! so a rerun can be checked byte for byte. Timestamps and wall-clock are
//! the only fields expected to differ between identical reruns.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    /// Resolved command line (after environment overrides); rerunning the
    /// binary with exactly these arguments reproduces the artifacts.
    pub command: String,
    pub scenario: Option<String>,
    pub seed: u64,
    pub controller: Option<String>,
    pub checkpoint: Option<String>,
    pub out_dir: String,
    pub started_unix_s: u64,
    pub wall_clock_s: f64,
    /// File name -> sha256 of everything written, manifest excluded.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: String, out_dir: &Path, seed: u64) -> RunManifest {
        let started_unix_s = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        RunManifest {
            command,
            scenario: None,
            seed,
            controller: None,
            checkpoint: None,
            out_dir: out_dir.display().to_string(),
            started_unix_s,
            wall_clock_s: 0.0,
            artifacts: BTreeMap::new(),
        }
    }

    /// Hashes a produced file and records it under its file name.
    pub fn add_artifact(&mut self, path: &Path) -> io::Result<()> {
        let bytes = fs::read(path)?;
        let digest = Sha256::digest(&bytes);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.artifacts.insert(name, hex);
        Ok(())
    }

    /// Writes `manifest.json` into the output directory. Goes through a
    /// temporary file and a rename so an interrupted run never leaves a
    /// torn manifest behind.
    pub fn write(mut self, out_dir: &Path, started: Instant) -> io::Result<PathBuf> {
        self.wall_clock_s = started.elapsed().as_secs_f64();
        let body = serde_json::to_string(&self).expect("manifest serializes");
        let target = out_dir.join(MANIFEST_FILE);
        let tmp = out_dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, body)?;
        fs::rename(&tmp, &target)?;
        Ok(target)
    }
}
