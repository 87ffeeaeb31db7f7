//! Per-run manifest: what ran, with which inputs, and the checksum of every
//! artifact it wrote. The run only succeeds once the manifest re-reads and
//! every checksum verifies.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cfdebias::dataio::sha256_hex;
use serde::{Deserialize, Serialize};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const TOOL: &str = concat!("cfdebias ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// UTC, RFC 3339.
    pub timestamp: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Input path → hex SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Path relative to the run directory → hex SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

/// Collects artifacts as they are written into one run directory.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    artifacts: BTreeMap<String, String>,
}

impl RunDir {
    /// Creates `root`. An existing non-empty directory is refused unless
    /// `force`, in which case its contents are removed first.
    pub fn create(root: &Path, force: bool) -> Result<Self> {
        if root.exists() {
            let non_empty =
                std::fs::read_dir(root).with_context(|| format!("reading {}", root.display()))?.next().is_some();
            if non_empty {
                if !force {
                    bail!("output directory {} is not empty; pass --force to overwrite", root.display());
                }
                std::fs::remove_dir_all(root).with_context(|| format!("clearing {}", root.display()))?;
            }
        }
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root: root.to_path_buf(), artifacts: BTreeMap::new() })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        self.write(rel, &serde_json::to_vec_pretty(value)?)
    }

    /// Registers files written by library code under `rel_dir`.
    pub fn record_existing(&mut self, rel_dir: &str, files: &[String]) -> Result<()> {
        for f in files {
            let rel = if rel_dir.is_empty() { f.clone() } else { format!("{rel_dir}/{f}") };
            let path = self.root.join(&rel);
            let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            self.artifacts.insert(rel, sha256_hex(&bytes));
        }
        Ok(())
    }

    /// Writes the manifest and verifies every artifact against it.
    pub fn finish(
        self,
        command: &str,
        config: serde_json::Value,
        seeds: Vec<u64>,
        inputs: BTreeMap<String, String>,
    ) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: command.to_string(),
            tool_version: TOOL.to_string(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            config,
            seeds,
            inputs,
            artifacts: self.artifacts,
        };
        let path = self.root.join(RUN_MANIFEST);
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        verify(&self.root)?;
        Ok(manifest)
    }
}

/// Re-reads the manifest in `root` and checks every artifact checksum.
pub fn verify(root: &Path) -> Result<RunManifest> {
    let path = root.join(RUN_MANIFEST);
    let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let manifest: RunManifest =
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    let mut bad = Vec::new();
    for (rel, sum) in &manifest.artifacts {
        match std::fs::read(root.join(rel)) {
            Ok(b) if sha256_hex(&b) == *sum => {}
            _ => bad.push(rel.as_str()),
        }
    }
    if !bad.is_empty() {
        bail!("artifacts failed checksum verification: {}", bad.join(", "));
    }
    Ok(manifest)
}

/// Checksums of every regular file under `path` (or of `path` itself),
/// keyed by display path.
pub fn checksum_inputs(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(p) = stack.pop() {
        if p.is_dir() {
            for entry in std::fs::read_dir(&p).with_context(|| format!("reading {}", p.display()))? {
                stack.push(entry?.path());
            }
        } else {
            let bytes = std::fs::read(&p).with_context(|| format!("reading {}", p.display()))?;
            out.insert(p.display().to_string(), sha256_hex(&bytes));
        }
    }
    Ok(out)
}
