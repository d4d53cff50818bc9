use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_DIR: &str = "manifests";
const LOCK_FILE: &str = ".regcl.lock";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub seed: u64,
    pub precision: String,
    pub config_sha256: String,
    /// Relative path to sha256 of every artifact this stage read.
    pub inputs: BTreeMap<String, String>,
    /// Relative path to sha256 of every artifact this stage wrote.
    pub outputs: BTreeMap<String, String>,
    pub formats: BTreeMap<String, u32>,
    pub wall_time_secs: f64,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    Ok(sha256_bytes(&fs::read(path)?))
}

pub fn manifest_path(out: &Path, stage: &str) -> PathBuf {
    out.join(MANIFEST_DIR).join(format!("{stage}.json"))
}

pub fn read_manifest(out: &Path, stage: &str) -> Result<Option<RunManifest>> {
    let path = manifest_path(out, stage);
    match fs::read(&path) {
        Ok(bytes) => Ok(Some(
            serde_json::from_slice(&bytes).with_context(|| format!("reading {}", path.display()))?,
        )),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
    }
}

pub fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<()> {
    let path = manifest_path(out, &manifest.stage);
    fs::create_dir_all(path.parent().expect("manifest dir"))?;
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Loads the manifest of an upstream stage and checks that every artifact
/// it recorded is still present with the same hash.
pub fn require(out: &Path, stage: &str, needed_by: &str) -> Result<RunManifest> {
    let Some(m) = read_manifest(out, stage)? else {
        bail!(
            "`{needed_by}` depends on `{stage}`, which has not run in {}: {} is missing",
            out.display(),
            manifest_path(out, stage).display()
        );
    };
    for (rel, want) in &m.outputs {
        let path = out.join(rel);
        let got = match sha256_file(&path) {
            Ok(h) => h,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                bail!("artifact {} written by `{stage}` is missing", path.display())
            }
            Err(e) => return Err(e).with_context(|| format!("hashing {}", path.display())),
        };
        if &got != want {
            bail!(
                "artifact {} no longer matches the hash recorded by `{stage}` (expected {want}, found {got})",
                path.display()
            );
        }
    }
    Ok(m)
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(out: &Path) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let path = out.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => bail!(
                "{} is locked by another stage ({}); delete the lock file if no stage is running",
                out.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("creating {}", path.display())),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let lock = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).unwrap_err().to_string().contains("locked"));
        drop(lock);
        DirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn require_detects_missing_and_changed() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path();
        let err = require(out, "fuse", "evaluate").unwrap_err().to_string();
        assert!(err.contains("depends on `fuse`"), "{err}");

        fs::write(out.join("a.txt"), "one").unwrap();
        let m = RunManifest {
            stage: "fuse".into(),
            seed: 0,
            precision: "f64".into(),
            config_sha256: String::new(),
            inputs: BTreeMap::new(),
            outputs: [("a.txt".to_string(), sha256_file(&out.join("a.txt")).unwrap())].into(),
            formats: BTreeMap::new(),
            wall_time_secs: 0.0,
        };
        write_manifest(out, &m).unwrap();
        assert_eq!(require(out, "fuse", "evaluate").unwrap(), m);
        fs::write(out.join("a.txt"), "two").unwrap();
        assert!(require(out, "fuse", "evaluate").unwrap_err().to_string().contains("no longer matches"));
        fs::remove_file(out.join("a.txt")).unwrap();
        assert!(require(out, "fuse", "evaluate").unwrap_err().to_string().contains("missing"));
    }

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
