//! Model checkpoint files.
//!
//! Layout: magic `MFTCKPT1`, u32 LE manifest length, JSON manifest, then a
//! raw little-endian f64 blob. The manifest lists each parameter path with
//! its shape and byte offset into the blob, in sorted path order, so a
//! save → load → save cycle is byte-identical.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, TransformerConfig};
use crate::tensor::Tensor;

const CKPT_MAGIC: &[u8; 8] = b"MFTCKPT1";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: TransformerConfig,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    path: String,
    shape: Vec<usize>,
    byte_offset: u64,
}

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (p, t) in params.iter() {
        entries.push(ManifestEntry {
            path: p.clone(),
            shape: t.shape().to_vec(),
            byte_offset: offset,
        });
        offset += (t.numel() * 8) as u64;
    }
    let manifest = Manifest {
        version: CKPT_VERSION,
        config: params.config.clone(),
        entries,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&(manifest_bytes.len() as u32).to_le_bytes())?;
    f.write_all(&manifest_bytes)?;
    for (_, t) in params.iter() {
        for v in t.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

pub fn from_bytes(buf: &[u8]) -> Result<ModelParams> {
    let corrupt = |offset: u64, reason: String| Error::CorruptFile { kind: "checkpoint", offset, reason };
    if buf.len() < 12 || &buf[..8] != CKPT_MAGIC {
        return Err(corrupt(0, "bad magic".into()));
    }
    let manifest_len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let blob_start = 12 + manifest_len;
    if buf.len() < blob_start {
        return Err(corrupt(8, format!("manifest length {manifest_len} exceeds file size")));
    }
    let manifest: Manifest = serde_json::from_slice(&buf[12..blob_start])
        .map_err(|e| corrupt(12, format!("manifest: {e}")))?;
    if manifest.version != CKPT_VERSION {
        return Err(corrupt(12, format!("unsupported version {}", manifest.version)));
    }
    let blob = &buf[blob_start..];
    let mut tensors = BTreeMap::new();
    for entry in &manifest.entries {
        let numel: usize = entry.shape.iter().product();
        let start = entry.byte_offset as usize;
        let end = start + numel * 8;
        if end > blob.len() {
            return Err(corrupt(
                (blob_start + start) as u64,
                format!("tensor '{}' runs past end of blob", entry.path),
            ));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(data, &entry.shape)
            .map_err(|e| corrupt((blob_start + start) as u64, format!("tensor '{}': {e}", entry.path)))?
            .with_requires_grad(true);
        tensors.insert(entry.path.clone(), t);
    }
    let expected_blob: usize = manifest
        .entries
        .iter()
        .map(|e| e.shape.iter().product::<usize>() * 8)
        .sum();
    if blob.len() != expected_blob {
        return Err(corrupt(
            (blob_start + expected_blob) as u64,
            "blob size does not match manifest".into(),
        ));
    }
    Ok(ModelParams::from_tensors(manifest.config, tensors))
}
