//! Run manifests, file digests and the per-directory run lock.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::run::Invocation;

pub const MANIFEST_DIR: &str = "manifests";
pub const LOCK_FILE: &str = ".wmcert.lock";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Relative to the run directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    /// Master seed; drawn at random when `--seed` was omitted.
    pub seed: u64,
    pub seed_was_given: bool,
    /// Effective configuration and file arguments.
    pub invocation: Invocation,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_unix: u64,
    pub duration_secs: f64,
}

impl Manifest {
    pub fn path_for(run_dir: &Path, subcommand: &str) -> PathBuf {
        run_dir.join(MANIFEST_DIR).join(format!("{subcommand}.json"))
    }

    pub fn write(&self, run_dir: &Path) -> anyhow::Result<PathBuf> {
        let path = Self::path_for(run_dir, &self.subcommand);
        std::fs::create_dir_all(path.parent().expect("manifest dir"))?;
        std::fs::write(&path, serde_json::to_vec_pretty(self)?)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading manifest {}", path.display()))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn digests(run_dir: &Path, files: &[PathBuf]) -> anyhow::Result<Vec<FileDigest>> {
    files
        .iter()
        .map(|p| Ok(FileDigest { path: p.clone(), sha256: sha256_file(&run_dir.join(p))? }))
        .collect()
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
    _file: File,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(run_dir).with_context(|| format!("creating run directory {}", run_dir.display()))?;
        let path = run_dir.join(LOCK_FILE);
        let mut file = match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(crate::UsageError(format!(
                "run directory {} is locked by another run; remove {} if that run is gone",
                run_dir.display(),
                path.display()
            ))),
            Err(e) => return Err(e.into()),
        };
        writeln!(file, "{}", std::process::id())?;
        Ok(Self { path, _file: file })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
