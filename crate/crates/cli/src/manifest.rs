//! Every command that produces artifacts drops a `manifest.json` in its
//! output directory recording what ran: the resolved config, the seed,
//! artifact format versions, wall-clock bounds, optimizer constants
//! where training is involved, and a content hash over the inputs the
//! command consumed. Re-running with the manifest's config reproduces
//! the outputs byte-identically apart from the timestamps, so
//! determinism checks compare everything except those.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug)]
pub enum ManifestError {
    Io { path: String, source: std::io::Error },
    Malformed { path: String, reason: String },
}

impl fmt::Display for ManifestError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ManifestError::Io { path, source } => write!(f, "{path}: {source}"),
            ManifestError::Malformed { path, reason } => write!(f, "{path}: {reason}"),
        }
    }
}

impl std::error::Error for ManifestError {}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct FormatVersions {
    pub dataset: u32,
    pub codebook: u32,
    pub checkpoint: u32,
}

impl Default for FormatVersions {
    fn default() -> Self {
        FormatVersions {
            dataset: crate::dataset::DATASET_FORMAT,
            codebook: crate::container::CODEBOOK_FORMAT,
            checkpoint: crate::container::CHECKPOINT_FORMAT,
        }
    }
}

/// Optimizer constants that are fixed in code rather than configurable.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimizerRecord {
    pub algorithm: String,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerRecord {
    pub fn adamw(weight_decay: f64) -> Self {
        OptimizerRecord {
            algorithm: String::from("adamw"),
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved configuration, defaults and overrides applied.
    /// Feeding this back through `--config` reproduces the run.
    pub config: serde_json::Value,
    pub seed: u64,
    pub formats: FormatVersions,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerRecord>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    /// SHA-256 over the command's labeled inputs (config, dataset
    /// directories, codebook or run files).
    pub input_hash: String,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64, input_hash: String) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            seed,
            formats: FormatVersions::default(),
            optimizer: None,
            started_unix_ms: now_unix_ms(),
            finished_unix_ms: 0,
            input_hash,
        }
    }
}

pub fn now_unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), ManifestError> {
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        let kind = entry.file_type().map_err(io_err(&path))?;
        if kind.is_dir() {
            collect_files(root, &path, out)?;
        } else if kind.is_file() {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// Hash of all regular files under `dir`, except names in `exclude` at
/// the top level. Each file contributes its slash-separated relative
/// path, a NUL, its byte length, and its bytes, in sorted path order.
pub fn hash_dir(dir: &Path, exclude: &[&str]) -> Result<String, ManifestError> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in &files {
        if rel.components().count() == 1 {
            let name = rel.to_string_lossy();
            if exclude.iter().any(|&e| e == name) {
                continue;
            }
        }
        let portable: Vec<String> = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect();
        let full = dir.join(rel);
        let bytes = fs::read(&full).map_err(io_err(&full))?;
        hasher.update(portable.join("/").as_bytes());
        hasher.update([0u8]);
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(to_hex(&hasher.finalize()))
}

pub fn hash_file(path: &Path) -> Result<String, ManifestError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hash_bytes(&bytes))
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    to_hex(&Sha256::digest(bytes))
}

/// Combine labeled part hashes into one input hash. Labels keep a
/// dataset hash from colliding with an identical codebook hash.
pub fn combine_hashes(parts: &[(&str, &str)]) -> String {
    let mut hasher = Sha256::new();
    for (label, digest) in parts {
        hasher.update(label.as_bytes());
        hasher.update([0u8]);
        hasher.update(digest.as_bytes());
        hasher.update([0u8]);
    }
    to_hex(&hasher.finalize())
}

fn to_hex(digest: &[u8]) -> String {
    let mut hex = String::with_capacity(digest.len() * 2);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// Stamp the end timestamp and write `manifest.json` into `dir`.
pub fn finalize_manifest(dir: &Path, mut manifest: RunManifest) -> Result<RunManifest, ManifestError> {
    manifest.finished_unix_ms = now_unix_ms();
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest, ManifestError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| ManifestError::Malformed {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dir_hash_ignores_excluded_manifest_but_sees_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("a.bin"), b"alpha").unwrap();
        fs::write(dir.path().join("sub/b.bin"), b"beta").unwrap();
        let base = hash_dir(dir.path(), &[MANIFEST_FILE]).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), b"{}").unwrap();
        assert_eq!(hash_dir(dir.path(), &[MANIFEST_FILE]).unwrap(), base);
        fs::write(dir.path().join("sub/b.bin"), b"gamma").unwrap();
        assert_ne!(hash_dir(dir.path(), &[MANIFEST_FILE]).unwrap(), base);
    }

    #[test]
    fn dir_hash_distinguishes_path_from_content_concatenation() {
        let a = tempfile::tempdir().unwrap();
        fs::write(a.path().join("ab"), b"c").unwrap();
        let b = tempfile::tempdir().unwrap();
        fs::write(b.path().join("a"), b"bc").unwrap();
        assert_ne!(hash_dir(a.path(), &[]).unwrap(), hash_dir(b.path(), &[]).unwrap());
    }

    #[test]
    fn labeled_combination_is_order_and_label_sensitive() {
        let h1 = hash_bytes(b"one");
        let h2 = hash_bytes(b"two");
        assert_ne!(
            combine_hashes(&[("data", &h1), ("codebook", &h2)]),
            combine_hashes(&[("codebook", &h1), ("data", &h2)])
        );
        assert_eq!(
            combine_hashes(&[("data", &h1)]),
            combine_hashes(&[("data", &h1)])
        );
    }

    #[test]
    fn finalize_then_read_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("model.bin"), b"weights").unwrap();
        let mut manifest = RunManifest::new(
            "train",
            serde_json::json!({"seed": 7}),
            7,
            hash_bytes(b"inputs"),
        );
        manifest.optimizer = Some(OptimizerRecord::adamw(0.01));
        let written = finalize_manifest(dir.path(), manifest).unwrap();
        assert!(written.finished_unix_ms >= written.started_unix_ms);
        let read = read_manifest(dir.path()).unwrap();
        assert_eq!(read.command, "train");
        assert_eq!(read.input_hash, written.input_hash);
        assert_eq!(read.optimizer, Some(OptimizerRecord::adamw(0.01)));
        assert_eq!(read.formats, FormatVersions::default());
    }
}
