//! `manifest.json` written into every run directory.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    /// SHA-256 over the command, its arguments, the resolved config and
    /// the bytes of every input file.
    pub input_hash: String,
    pub started: String,
    pub finished: String,
    pub outputs: Vec<PathBuf>,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Files under `path` in sorted order, skipping run manifests; `path`
/// itself when it is a file.
fn files_under(path: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if path.file_name().is_some_and(|n| n == "manifest.json") {
        return Ok(());
    }
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            files_under(&e, out)?;
        }
    } else if path.is_file() {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Hashes `parts` and then each input's relative file names and contents.
pub fn input_hash(parts: &[&str], inputs: &[PathBuf]) -> std::io::Result<String> {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    for root in inputs {
        let mut files = Vec::new();
        files_under(root, &mut files)?;
        for f in files {
            let rel = f.strip_prefix(root).unwrap_or(&f).to_string_lossy().into_owned();
            h.update(rel.as_bytes());
            let mut buf = Vec::new();
            fs::File::open(&f)?.read_to_end(&mut buf)?;
            h.update((buf.len() as u64).to_le_bytes());
            h.update(&buf);
        }
    }
    Ok(hex::encode(h.finalize()))
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_names_and_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        fs::create_dir_all(a.join("sub")).unwrap();
        fs::write(a.join("sub/x.bin"), [1u8, 2, 3]).unwrap();
        let h1 = input_hash(&["train"], std::slice::from_ref(&a)).unwrap();
        assert_eq!(h1, input_hash(&["train"], std::slice::from_ref(&a)).unwrap());
        assert_eq!(h1.len(), 64);
        assert_ne!(h1, input_hash(&["eval"], std::slice::from_ref(&a)).unwrap());
        fs::write(a.join("sub/x.bin"), [1u8, 2, 4]).unwrap();
        assert_ne!(h1, input_hash(&["train"], std::slice::from_ref(&a)).unwrap());
        // ["ab"] and ["a", "b"] must differ
        assert_ne!(input_hash(&["ab"], &[]).unwrap(), input_hash(&["a", "b"], &[]).unwrap());
    }
}
