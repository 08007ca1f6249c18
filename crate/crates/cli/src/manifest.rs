//! Run manifest: inputs, config hash and artifact checksums.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;
use shadefuse_core::config::Config;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: Vec<FileEntry>,
    pub artifacts: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(shadefuse_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn hash_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Every regular file under `root` (or `root` itself), sorted by path.
fn files_under(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    if root.is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| io_err(&dir, e))? {
            let p = entry.map_err(|e| io_err(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn entries(paths: &[PathBuf]) -> Result<Vec<FileEntry>, CliError> {
    let mut out = Vec::new();
    for root in paths {
        for p in files_under(root)? {
            out.push(FileEntry {
                path: p.display().to_string(),
                sha256: hash_file(&p)?,
            });
        }
    }
    Ok(out)
}

/// Files excluded from the artifact list: the manifest itself and wall-clock timing.
const UNHASHED: [&str; 2] = [FILE_NAME, "timing.json"];

/// Writes the effective config and the manifest over every file in `out`.
pub fn finish(out: &Path, command: &str, cfg: &Config, inputs: &[PathBuf]) -> Result<(), CliError> {
    let text = cfg.to_text();
    write(&out.join("config.txt"), &text)?;
    let mut artifacts = Vec::new();
    for p in files_under(out)? {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if UNHASHED.contains(&name) {
            continue;
        }
        let rel = p.strip_prefix(out).unwrap_or(&p);
        artifacts.push(FileEntry {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: hash_file(&p)?,
        });
    }
    let m = Manifest {
        command: command.to_string(),
        seed: cfg.seed,
        config_sha256: sha256_hex(text.as_bytes()),
        inputs: entries(inputs)?,
        artifacts,
    };
    write(&out.join(FILE_NAME), serde_json::to_string_pretty(&m).expect("manifest serializes"))
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}
