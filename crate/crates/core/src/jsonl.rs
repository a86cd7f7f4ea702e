//! JSON-lines helpers shared by the manifests and feature caches.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Reads every non-blank line of `path` as one `T`.
pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| JsonlError::Io {
        path: display.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| JsonlError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| JsonlError::Parse {
            path: display.clone(),
            line: idx + 1,
            source,
        })?;
        out.push(value);
    }
    Ok(out)
}

/// Writes `rows` one JSON object per line, creating parent directories.
pub fn write<'a, T, I>(path: &Path, rows: I) -> Result<(), JsonlError>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let display = path.display().to_string();
    let io_err = |source| JsonlError::Io {
        path: display.clone(),
        source,
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|e| io_err(e.into()))?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}
