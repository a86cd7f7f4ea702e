use anyhow::Context;
use clonegrade::semantic::{open_store, read_embedding_jsonl, write_store, Pooling, MAGIC};

use super::{require, MANIFEST};
use crate::manifest::Manifest;
use crate::{ImportArgs, UsageError};

/// Re-encodes the input with records sorted by fragment id, so the output
/// bytes do not depend on the producer's write order.
pub(super) fn run(a: &ImportArgs) -> anyhow::Result<serde_json::Value> {
    require(&a.input, "--input")?;
    let pooling_flag = a
        .pooling
        .as_deref()
        .map(|s| s.parse::<Pooling>().map_err(|e| UsageError(format!("--pooling: {e}"))))
        .transpose()?;
    let mut manifest = Manifest::new("import-embeddings");
    manifest.input(&a.input)?;

    let mut head = [0u8; 4];
    let is_tfem = {
        use std::io::Read;
        let mut f = std::fs::File::open(&a.input)?;
        f.read(&mut head)? == 4 && &head == MAGIC
    };

    let (dim, pooling, mut rows) = if is_tfem {
        let store = open_store(&a.input).with_context(|| a.input.display().to_string())?;
        if let Some(p) = pooling_flag {
            anyhow::ensure!(p == store.pooling(), "--pooling {} but the store is {}", p.as_str(), store.pooling().as_str());
        }
        let rows = store
            .ids()
            .into_iter()
            .map(|id| store.get(id).map(|e| (e.fragment_id, e.vector)))
            .collect::<Result<Vec<_>, _>>()?;
        (store.dim(), store.pooling(), rows)
    } else {
        let (dim, rows) = read_embedding_jsonl(&a.input).with_context(|| a.input.display().to_string())?;
        (dim, pooling_flag.unwrap_or(Pooling::Cls), rows.into_iter().map(|r| (r.fragment_id, r.vector)).collect())
    };
    if let Some(expected) = a.dim {
        anyhow::ensure!(expected == dim, "--dim {expected} but the input has width {dim}");
    }
    rows.sort_by(|x, y| x.0.cmp(&y.0));

    manifest.config(serde_json::json!({ "dim": dim, "pooling": pooling.as_str() }))?;
    let out = a.out.join("embeddings.tfem");
    write_store(&out, dim, pooling, rows.iter().map(|(id, v)| (id.as_str(), v.as_slice())))?;
    manifest.output("embeddings.tfem");
    manifest.write(&a.out.join(MANIFEST))?;

    Ok(serde_json::json!({
        "command": "import-embeddings",
        "records": rows.len(),
        "dim": dim,
        "pooling": pooling.as_str(),
    }))
}
