//! Checkpoint file pairs: `<stem>.bin` holds every tensor as little-endian
//! `f64` back to back, `<stem>.json` lists names and shapes in file order
//! plus free-form metadata.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Error, Result, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub const FORMAT: &str = "sensorlab-f64le-v1";

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("bin"), stem.with_extension("json"))
}

pub fn save_tensors(
    stem: &Path,
    tensors: &[(String, &Tensor)],
    metadata: serde_json::Value,
) -> Result<()> {
    let (bin, json) = paths(stem);
    let mut bytes = Vec::with_capacity(tensors.iter().map(|(_, t)| t.len() * 8).sum());
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        metadata,
        tensors: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&bin, bytes)?;
    fs::write(&json, text + "\n")?;
    Ok(())
}

pub fn load_tensors(stem: &Path) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let (bin, json) = paths(stem);
    let text = fs::read_to_string(&json)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", json.display())))?;
    if manifest.format != FORMAT {
        return Err(Error::Format(format!(
            "unsupported checkpoint format {:?}",
            manifest.format
        )));
    }
    let bytes = fs::read(&bin)?;
    let total: usize = manifest
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != total * 8 {
        return Err(Error::Format(format!(
            "{} holds {} bytes but the manifest describes {} values",
            bin.display(),
            bytes.len(),
            total
        )));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    let mut off = 0;
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let data = bytes[off..off + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        off += n * 8;
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), data)));
    }
    Ok((manifest, out))
}
