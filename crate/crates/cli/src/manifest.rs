//! Provenance record written at the end of every command.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use disenpoi::bundle::write_atomic;

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Content hash in the style of git object ids: SHA-256 over
/// `"blob <len>\0"` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn hash_file(path: &Path) -> io::Result<String> {
    Ok(content_hash(&fs::read(path)?))
}

/// Hashes every regular file directly inside `dir`, keyed by file name.
pub fn hash_dir(dir: &Path, skip: &[&str]) -> io::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.file_type()?.is_file() && !skip.contains(&name.as_str()) && !name.starts_with('.') {
            out.insert(name, hash_file(&entry.path())?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Input path -> content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output file name -> content hash.
    pub outputs: BTreeMap<String, String>,
    /// Resolved settings, defaults included.
    pub settings: serde_json::Value,
    pub started_at: String,
    pub finished_at: String,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        let path = dir.join(MANIFEST_FILE);
        write_atomic(&path, |f| {
            serde_json::to_writer_pretty(&mut *f, self).map_err(io::Error::other)?;
            f.write_all(b"\n")
        })
    }

    pub fn read(dir: &Path) -> io::Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(io::Error::other)
    }

    /// Names of inputs and outputs whose current content no longer matches
    /// the recorded hash. Outputs are resolved against `output_dir`.
    pub fn stale_entries(&self) -> Vec<String> {
        let inputs = self.inputs.iter().map(|(p, h)| (p.clone(), PathBuf::from(p), h));
        let outputs = self.outputs.iter().map(|(n, h)| (n.clone(), self.output_dir.join(n), h));
        inputs
            .chain(outputs)
            .filter(|(_, path, hash)| hash_file(path).ok().as_ref() != Some(*hash))
            .map(|(name, _, _)| name)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_blob_matches_git_sha256() {
        // `git hash-object --object-format=sha256` of an empty file
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn stale_detection() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("a.txt");
        fs::write(&out, "one").unwrap();
        let m = RunManifest {
            command: "x".into(),
            config_path: None,
            data_path: None,
            output_dir: dir.path().to_path_buf(),
            seed: 0,
            inputs: BTreeMap::new(),
            outputs: hash_dir(dir.path(), &[]).unwrap(),
            settings: serde_json::Value::Null,
            started_at: String::new(),
            finished_at: String::new(),
            wall_clock_secs: 0.0,
        };
        m.write(dir.path()).unwrap();
        let back = RunManifest::read(dir.path()).unwrap();
        assert_eq!(back, m);
        assert!(back.stale_entries().is_empty());
        fs::write(&out, "two").unwrap();
        assert_eq!(back.stale_entries(), vec!["a.txt".to_string()]);
    }
}
