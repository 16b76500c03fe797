//! Output directory bookkeeping: artifact hashes and manifest.json.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use sketchprompt::{Error, Result};

#[derive(Debug, Serialize)]
struct Artifact {
    path: String,
    sha256: String,
    bytes: u64,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: &'a str,
    config: &'a str,
    created: Option<String>,
    artifacts: Vec<Artifact>,
}

/// Collects the files a command writes under its output directory.
pub struct OutDir {
    pub root: PathBuf,
    files: Vec<PathBuf>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    /// Path for `name` inside the directory, recorded as an artifact.
    pub fn file(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.root.join(name);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        if !self.files.contains(&p) {
            self.files.push(p.clone());
        }
        Ok(p)
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.file(name)?;
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    /// Writes manifest.json listing every recorded artifact that exists.
    pub fn finish(self, command: &str, config_hash: &str, config: &str) -> Result<PathBuf> {
        let mut artifacts = Vec::new();
        for p in &self.files {
            let Ok(bytes) = fs::read(p) else { continue };
            let rel = p.strip_prefix(&self.root).unwrap_or(p);
            artifacts.push(Artifact {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect(),
                bytes: bytes.len() as u64,
            });
        }
        let m = Manifest {
            command,
            config_hash,
            config,
            created: timestamp(),
            artifacts,
        };
        let path = self.root.join("manifest.json");
        let text = serde_json::to_string_pretty(&m)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// RFC 3339 time, from SOURCE_DATE_EPOCH when set so outputs can be
/// reproduced bit for bit.
pub fn timestamp() -> Option<String> {
    let secs = match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(v) => v.trim().parse::<i64>().ok()?,
        Err(_) => std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .ok()?
            .as_secs() as i64,
    };
    time::OffsetDateTime::from_unix_timestamp(secs)
        .ok()?
        .format(&time::format_description::well_known::Rfc3339)
        .ok()
}
