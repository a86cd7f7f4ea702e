//! Run manifests: the resolved configuration, a digest of every input file
//! read, and the tool version. No timestamps, so identical runs produce
//! identical manifests.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: &'static str,
    pub version: &'static str,
    pub config: serde_json::Value,
    /// path -> hex SHA-256
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &'static str) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn config(&mut self, value: impl Serialize) -> anyhow::Result<()> {
        self.config = serde_json::to_value(value)?;
        Ok(())
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, name: impl Into<String>) {
        self.outputs.push(name.into());
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        write_json(path, self)
    }
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let mut f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

/// Pretty JSON plus a trailing newline; creates parent directories.
pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Manifest path for a single-file output: `report.json` -> `report.manifest.json`.
pub fn sibling_manifest(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.manifest.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_known_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        std::fs::write(&p, b"abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn sibling_name() {
        assert_eq!(sibling_manifest(Path::new("out/report.json")), Path::new("out/report.manifest.json"));
    }
}
