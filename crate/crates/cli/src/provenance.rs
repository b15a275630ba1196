use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Git-style object hash (`"blob <len>\0" + content`) with SHA-256.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex(&h.finalize())
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            walk(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            out.push((rel, p));
        }
    }
    Ok(())
}

/// Blob hash of a file, or for a directory a tree hash over the sorted
/// `(relative path, blob hash)` list.
pub fn content_hash(path: &Path) -> Result<String, CliError> {
    let io = |e: std::io::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    if path.is_file() {
        return Ok(blob_hash(&fs::read(path).map_err(io)?));
    }
    let mut files = Vec::new();
    walk(path, path, &mut files).map_err(io)?;
    files.sort();
    let mut h = Sha256::new();
    for (rel, p) in files {
        let blob = blob_hash(&fs::read(&p).map_err(io)?);
        h.update(format!("{blob} {rel}\n").as_bytes());
    }
    Ok(hex(&h.finalize()))
}

#[derive(Debug, Serialize)]
struct Input {
    role: String,
    path: String,
    sha256: String,
}

/// Record of one command invocation.
#[derive(Debug, Serialize)]
pub struct Provenance {
    command: String,
    argv: Vec<String>,
    version: &'static str,
    seed: u64,
    threads: usize,
    config: Value,
    inputs: Vec<Input>,
    /// Hash over the config and every input hash.
    content_hash: String,
}

impl Provenance {
    pub fn new(command: &str, config: &impl Serialize, seed: u64, threads: usize) -> Result<Self, CliError> {
        Ok(Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            seed,
            threads,
            config: serde_json::to_value(config).map_err(|e| CliError::Runtime(e.to_string()))?,
            inputs: Vec::new(),
            content_hash: String::new(),
        })
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<(), CliError> {
        self.inputs.push(Input {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256: content_hash(path)?,
        });
        Ok(())
    }

    pub fn write(mut self, out: &Path) -> Result<(), CliError> {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&self.config).unwrap_or_default().as_bytes());
        for i in &self.inputs {
            h.update(format!("{} {}\n", i.role, i.sha256).as_bytes());
        }
        self.content_hash = hex(&h.finalize());
        let path = out.join("provenance.json");
        let text = serde_json::to_string_pretty(&self).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_blob_matches_git_sha256() {
        // `git hash-object --object-format=sha256 /dev/null`
        assert_eq!(blob_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
    }
}
