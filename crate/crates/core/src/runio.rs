//! Run-directory layout and atomic file I/O.
//!
//! A run directory is the unit of reproducibility: it holds the resolved
//! config, the emitted plan, per-iteration logs, checkpoints, codebooks and
//! report CSVs. Reports are written to a temp file and renamed, so a failed
//! command never leaves a half-written report behind.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Fixed layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Create (or reopen) a run directory with the standard subdirectories.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["logs", "checkpoints", "codebooks", "reports"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(RunDir { root })
    }

    /// Open an existing run directory, failing if the layout is absent.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.join("checkpoints").is_dir() {
            return Err(Error::config(format!(
                "{} is not a run directory (missing checkpoints/)",
                root.display()
            )));
        }
        Ok(RunDir { root })
    }

    pub fn config_json(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn plan_json(&self) -> PathBuf {
        self.root.join("plan.json")
    }

    pub fn log_csv(&self, iteration: usize) -> PathBuf {
        self.root.join(format!("logs/train_iter{iteration:02}.csv"))
    }

    /// Per-iteration checkpoint root; step checkpoints live below it as
    /// `step{N}/`.
    pub fn checkpoint_root(&self, iteration: usize) -> PathBuf {
        self.root.join(format!("checkpoints/iter{iteration:02}"))
    }

    pub fn codebook_dir(&self, iteration: usize) -> PathBuf {
        self.root.join(format!("codebooks/iter{iteration:02}"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    /// All checkpoint directories (`checkpoints/iterNN/stepM`), sorted by
    /// iteration then step number.
    pub fn checkpoints(&self) -> Result<Vec<PathBuf>> {
        let mut keyed = Vec::new();
        let dir = self.root.join("checkpoints");
        if dir.is_dir() {
            for e in fs::read_dir(&dir)? {
                let iter_dir = e?.path();
                if !iter_dir.is_dir() {
                    continue;
                }
                for s in fs::read_dir(&iter_dir)? {
                    let p = s?.path();
                    if p.join("manifest.json").is_file() {
                        let step = p
                            .file_name()
                            .and_then(|n| n.to_str())
                            .and_then(|n| n.strip_prefix("step"))
                            .and_then(|n| n.parse::<usize>().ok())
                            .unwrap_or(usize::MAX);
                        keyed.push((iter_dir.clone(), step, p));
                    }
                }
            }
        }
        keyed.sort();
        Ok(keyed.into_iter().map(|(_, _, p)| p).collect())
    }
}

/// Write `bytes` to `path` atomically (temp file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Write a string atomically.
pub fn write_atomic_str(path: &Path, contents: &str) -> Result<()> {
    write_atomic(path, contents.as_bytes())
}

/// Exclusive lock on a run directory for the lifetime of the guard.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_root: &Path) -> Result<Self> {
        fs::create_dir_all(run_root)?;
        let path = run_root.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::config(format!(
                "run directory {} is locked (stale {}? remove it if no run is active)",
                run_root.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
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

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_atomic_str(&p, "a,b\n1,2\n").unwrap();
        write_atomic_str(&p, "a,b\n3,4\n").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "a,b\n3,4\n");
        // no temp file left behind
        let leftovers: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn lock_is_exclusive_and_released_on_drop() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(RunLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn run_dir_layout_is_complete() {
        let dir = tempfile::tempdir().unwrap();
        let rd = RunDir::create(dir.path().join("run")).unwrap();
        for sub in ["logs", "checkpoints", "codebooks", "reports"] {
            assert!(rd.root.join(sub).is_dir(), "missing {sub}");
        }
    }
}
