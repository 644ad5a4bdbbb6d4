//! Per-output-directory manifest of artifact hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MANIFEST_MAGIC: &str = "# bitbudget manifest v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub created_unix: u64,
    pub updated_unix: u64,
    pub files: BTreeMap<String, Entry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Seconds since the epoch, or `SOURCE_DATE_EPOCH` when set.
fn now() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0))
}

impl RunManifest {
    pub fn new(config_hash: &str) -> Self {
        let t = now();
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            created_unix: t,
            updated_unix: t,
            files: BTreeMap::new(),
        }
    }

    pub fn path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    /// The directory's manifest, or a fresh one if none exists.
    pub fn open(dir: &Path, config_hash: &str) -> Result<Self> {
        let path = Self::path(dir);
        if !path.exists() {
            return Ok(Self::new(config_hash));
        }
        let mut m = Self::load(dir)?;
        m.config_hash = config_hash.to_string();
        m.tool_version = env!("CARGO_PKG_VERSION").to_string();
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = Self::path(dir);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |what: String| CliError::Manifest(what);
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_MAGIC) {
            return Err(bad("missing magic line".into()));
        }
        let mut header = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(format!("missing `{key}`")))?;
            line.strip_prefix(key)
                .map(|v| v.trim().to_string())
                .ok_or_else(|| bad(format!("expected `{key}`, found `{line}`")))
        };
        let tool_version = header("tool_version")?;
        let config_hash = header("config_hash")?;
        let created_unix = header("created_unix")?.parse().map_err(|_| bad("created_unix".into()))?;
        let updated_unix = header("updated_unix")?.parse().map_err(|_| bad("updated_unix".into()))?;
        let mut files = BTreeMap::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            let ["file", name, sha, bytes] = f.as_slice() else {
                return Err(bad(format!("malformed entry `{line}`")));
            };
            let bytes = bytes.parse().map_err(|_| bad(format!("byte count in `{line}`")))?;
            files.insert(
                name.to_string(),
                Entry {
                    sha256: sha.to_string(),
                    bytes,
                },
            );
        }
        Ok(Self {
            tool_version,
            config_hash,
            created_unix,
            updated_unix,
            files,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{MANIFEST_MAGIC}\ntool_version {}\nconfig_hash {}\ncreated_unix {}\nupdated_unix {}\n",
            self.tool_version, self.config_hash, self.created_unix, self.updated_unix
        );
        for (name, e) in &self.files {
            out.push_str(&format!("file {name} {} {}\n", e.sha256, e.bytes));
        }
        out
    }

    /// Writes `bytes` to `dir/name` and records its hash.
    pub fn write(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.files.insert(
            name.to_string(),
            Entry {
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            },
        );
        Ok(())
    }

    pub fn save(&mut self, dir: &Path) -> Result<()> {
        self.updated_unix = now();
        let path = Self::path(dir);
        std::fs::write(&path, self.to_text()).map_err(|e| CliError::io(&path, e))
    }

    /// Reads `dir/name`, failing unless it is listed and its hash matches.
    pub fn read_verified(&self, dir: &Path, name: &str) -> Result<Vec<u8>> {
        let entry = self
            .files
            .get(name)
            .ok_or_else(|| CliError::Manifest(format!("`{name}` is not recorded; run the producing command first")))?;
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        let actual = sha256_hex(&bytes);
        if actual != entry.sha256 {
            return Err(CliError::HashMismatch {
                file: name.to_string(),
                expected: entry.sha256.clone(),
                actual,
            });
        }
        Ok(bytes)
    }

    /// Hash-checks every listed file.
    pub fn verify_all(&self, dir: &Path) -> Result<()> {
        for name in self.files.keys() {
            self.read_verified(dir, name)?;
        }
        Ok(())
    }
}
