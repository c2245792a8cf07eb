//! Run manifest: config hash, tool version, and a content-hashed inventory
//! of every artifact in the run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ArtifactEntry {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    /// Relative path -> content hash, for every file in the run directory.
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

impl RunManifest {
    /// Inventory the run directory (excluding the manifest itself and the
    /// lock file) and write `manifest.json`.
    pub fn rebuild(run_dir: &Path, config_hash: &str) -> Result<RunManifest> {
        let manifest = RunManifest {
            config_hash: config_hash.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            artifacts: inventory(run_dir)?,
        };
        let path = run_dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    pub fn read(run_dir: &Path) -> Result<RunManifest> {
        let path = run_dir.join(MANIFEST_FILE);
        Ok(serde_json::from_str(
            &fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?,
        )?)
    }

    /// Check that every listed artifact hashes to its recorded value and
    /// that no unlisted files (orphans) exist.
    pub fn verify(&self, run_dir: &Path) -> Result<()> {
        let current = inventory(run_dir)?;
        for (rel, entry) in &self.artifacts {
            match current.get(rel) {
                None => return Err(Error::Invariant(format!("missing artifact {rel}"))),
                Some(got) if got != entry => {
                    return Err(Error::Invariant(format!("artifact {rel} hash mismatch")))
                }
                _ => {}
            }
        }
        for rel in current.keys() {
            if !self.artifacts.contains_key(rel) {
                return Err(Error::Invariant(format!("orphan file {rel} not in manifest")));
            }
        }
        Ok(())
    }
}

fn inventory(run_dir: &Path) -> Result<BTreeMap<String, ArtifactEntry>> {
    let mut artifacts = BTreeMap::new();
    let mut stack = vec![run_dir.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path
                .strip_prefix(run_dir)
                .map_err(|_| Error::Invariant("path outside run dir".into()))?
                .to_string_lossy()
                .replace('\\', "/");
            if rel == MANIFEST_FILE || rel == LOCK_FILE {
                continue;
            }
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            artifacts.insert(
                rel,
                ArtifactEntry {
                    sha256: hex::encode(Sha256::digest(&bytes)),
                    bytes: bytes.len() as u64,
                },
            );
        }
    }
    Ok(artifacts)
}

/// Exclusive lock on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<RunLock> {
        let path = run_dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::invalid(
                format!(
                    "run directory {} is locked by another invocation (remove {} if stale)",
                    run_dir.display(),
                    path.display()
                ),
            )),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn manifest_covers_everything_and_detects_orphans() {
        let dir = tempdir().unwrap();
        fs::create_dir(dir.path().join("reports")).unwrap();
        fs::write(dir.path().join("a.txt"), b"alpha").unwrap();
        fs::write(dir.path().join("reports/b.csv"), b"x,y\n1,2\n").unwrap();
        let m = RunManifest::rebuild(dir.path(), "cfg").unwrap();
        assert_eq!(m.artifacts.len(), 2);
        m.verify(dir.path()).unwrap();

        fs::write(dir.path().join("orphan.bin"), b"zz").unwrap();
        assert!(m.verify(dir.path()).is_err());

        let m2 = RunManifest::rebuild(dir.path(), "cfg").unwrap();
        m2.verify(dir.path()).unwrap();
        fs::write(dir.path().join("a.txt"), b"tampered").unwrap();
        assert!(m2.verify(dir.path()).is_err());
    }

    #[test]
    fn lock_excludes_concurrent_use() {
        let dir = tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(lock);
        let again = RunLock::acquire(dir.path()).unwrap();
        drop(again);
    }
}
