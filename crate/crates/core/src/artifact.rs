// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary container shared by checkpoints and activation stores:
//! `magic[8] | version u32 | header_len u64 | header JSON | payload`.
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Artifact {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes to a sibling temp file, then renames, so readers never see a
/// partial artifact.
pub fn write<H: Serialize>(
    path: &Path,
    magic: &[u8; 8],
    header: &H,
    payload: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension("partial");
    let header = serde_json::to_vec(header)?;
    let write_all = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(magic)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        payload(&mut w)?;
        w.flush()
    };
    write_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads and validates the container preamble, returning the header and a
/// reader positioned at the payload.
pub fn open<H: DeserializeOwned>(path: &Path, magic: &[u8; 8]) -> Result<(H, BufReader<File>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut m = [0u8; 8];
    r.read_exact(&mut m).map_err(|e| Error::io(path, e))?;
    if &m != magic {
        return Err(bad(path, format!("bad magic {:?}", String::from_utf8_lossy(&m))));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(bad(path, format!("unsupported version {version}")));
    }
    let mut l = [0u8; 8];
    r.read_exact(&mut l).map_err(|e| Error::io(path, e))?;
    let len = u64::from_le_bytes(l) as usize;
    if len > 1 << 26 {
        return Err(bad(path, "header too large"));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
    let header = serde_json::from_slice(&header).map_err(|e| bad(path, e.to_string()))?;
    Ok((header, r))
}

pub fn write_f32s(w: &mut dyn Write, values: impl IntoIterator<Item = f32>) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_f64s(w: &mut dyn Write, values: impl IntoIterator<Item = f64>) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f32s(r: &mut impl Read, n: usize, path: &Path) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)
        .map_err(|e| bad(path, format!("truncated payload: {e}")))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub fn read_f64s(r: &mut impl Read, n: usize, path: &Path) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|e| bad(path, format!("truncated payload: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn expect_eof(r: &mut impl Read, path: &Path) -> Result<()> {
    let mut one = [0u8; 1];
    match r.read(&mut one) {
        Ok(0) => Ok(()),
        Ok(_) => Err(bad(path, "trailing bytes after payload")),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FFNPCKPT";

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Header of a named-tensor checkpoint.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub dtype: String,
    pub config: serde_json::Value,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorMeta>,
}

/// Saves named tensors in their native precision.
pub fn save_tensors<T: crate::nn::Scalar>(
    path: &Path,
    kind: &str,
    config: serde_json::Value,
    meta: serde_json::Value,
    tensors: &[(&str, &crate::nn::Tensor<T>)],
) -> Result<()> {
    let header = CheckpointHeader {
        kind: kind.to_string(),
        dtype: T::NAME.to_string(),
        config,
        meta,
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorMeta {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    write(path, CHECKPOINT_MAGIC, &header, |w| {
        for (_, t) in tensors {
            if T::NAME == "f32" {
                write_f32s(w, t.data().iter().map(|v| v.to_f64() as f32))?;
            } else {
                write_f64s(w, t.data().iter().map(|v| v.to_f64()))?;
            }
        }
        Ok(())
    })
}

/// Loads a checkpoint of the given kind, converting to `T` if needed.
pub fn load_tensors<T: crate::nn::Scalar>(
    path: &Path,
    kind: &str,
) -> Result<(CheckpointHeader, Vec<crate::nn::Tensor<T>>)> {
    let (header, mut r): (CheckpointHeader, _) = open(path, CHECKPOINT_MAGIC)?;
    if header.kind != kind {
        return Err(bad(path, format!("expected a {kind} checkpoint, found {}", header.kind)));
    }
    let mut out = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        let n: usize = meta.shape.iter().product();
        let data: Vec<T> = match header.dtype.as_str() {
            "f32" => read_f32s(&mut r, n, path)?.into_iter().map(|v| T::from_f64(v as f64)).collect(),
            "f64" => read_f64s(&mut r, n, path)?.into_iter().map(T::from_f64).collect(),
            other => return Err(bad(path, format!("unknown dtype {other}"))),
        };
        out.push(crate::nn::Tensor::new(meta.shape.clone(), data)?);
    }
    expect_eof(&mut r, path)?;
    Ok((header, out))
}
