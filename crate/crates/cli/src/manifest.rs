//! Run manifest: what each stage wrote and the hashes that make reruns
//! idempotent.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_SNAPSHOT: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the run directory unless absolute.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of the stage's configuration and upstream outputs.
    pub key: String,
    pub outputs: Vec<OutputFile>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_snapshot: PathBuf,
    pub config_sha256: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut f = fs::File::open(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

impl RunManifest {
    pub fn new(config_bytes: &[u8], seed: u64) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_snapshot: PathBuf::from(CONFIG_SNAPSHOT),
            config_sha256: sha256_bytes(config_bytes),
            seed,
            stages: BTreeMap::new(),
        }
    }

    pub fn load(dir: &Path) -> CliResult<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = fs::read(&path)?;
        serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
    }

    /// Writes the manifest after checking that every listed output exists.
    pub fn save(&self, dir: &Path) -> CliResult<()> {
        for (stage, rec) in &self.stages {
            for o in &rec.outputs {
                let p = dir.join(&o.path);
                if !p.exists() {
                    return Err(CliError::Runtime(format!("stage {stage} lists missing output {}", p.display())));
                }
            }
        }
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        fs::write(dir.join(MANIFEST_FILE), bytes)?;
        Ok(())
    }

    /// True when `stage` completed with `key` and its outputs still hash
    /// to the recorded values.
    pub fn is_current(&self, dir: &Path, stage: &str, key: &str) -> bool {
        match self.stages.get(stage) {
            Some(rec) if rec.key == key => rec
                .outputs
                .iter()
                .all(|o| sha256_file(&dir.join(&o.path)).map(|h| h == o.sha256).unwrap_or(false)),
            _ => false,
        }
    }

    /// Paths whose recorded hash no longer matches the file on disk.
    pub fn verify(&self, dir: &Path) -> Vec<PathBuf> {
        self.stages
            .values()
            .flat_map(|r| r.outputs.iter())
            .filter(|o| sha256_file(&dir.join(&o.path)).map(|h| h != o.sha256).unwrap_or(true))
            .map(|o| o.path.clone())
            .collect()
    }
}

/// Hashes `paths` (relative to `dir` or absolute) into output records.
pub fn hash_outputs(dir: &Path, paths: &[PathBuf]) -> CliResult<Vec<OutputFile>> {
    paths
        .iter()
        .map(|p| Ok(OutputFile { path: p.clone(), sha256: sha256_file(&dir.join(p))? }))
        .collect()
}

/// Every regular file below `root`, sorted, as paths relative to `base`
/// when `root` lies inside it.
pub fn list_files(base: &Path, root: &Path) -> CliResult<Vec<PathBuf>> {
    fn walk(p: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in fs::read_dir(p)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, out)?;
            } else {
                out.push(path);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, &mut out).map_err(|e| CliError::Runtime(format!("{}: {e}", root.display())))?;
    out.sort();
    Ok(out.into_iter().map(|p| p.strip_prefix(base).map(Path::to_path_buf).unwrap_or(p)).collect())
}
