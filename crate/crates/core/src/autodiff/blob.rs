//! Named f32 tensors on disk: a JSON index next to one little-endian payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};
use crate::imgvol::io::{f32_bytes, f32_from_bytes};

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    dtype: String,
    byte_order: String,
    data_file: String,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

/// Write `path` (JSON index) and `path.bin` (payload).
pub fn write_blob(path: impl AsRef<Path>, tensors: &[NamedTensor], meta: serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bin = path.with_extension("bin");
    let index = Index {
        dtype: "float32".into(),
        byte_order: "little".into(),
        data_file: bin
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        meta,
        tensors: tensors
            .iter()
            .map(|t| Entry {
                name: t.name.clone(),
                shape: t.value.shape().to_vec(),
            })
            .collect(),
    };
    let mut payload = Vec::new();
    for t in tensors {
        payload.extend(f32_bytes(t.value.data()));
    }
    fs::write(path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(path, e))?;
    fs::write(&bin, payload).map_err(|e| Error::io(&bin, e))
}

/// Read a blob written by [`write_blob`], returning the tensors and the metadata.
pub fn read_blob(path: impl AsRef<Path>) -> Result<(Vec<NamedTensor>, serde_json::Value)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let index: Index = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.into(),
        reason: e.to_string(),
    })?;
    if index.dtype != "float32" || index.byte_order != "little" {
        return Err(Error::Format {
            path: path.into(),
            reason: format!("unsupported dtype {} / byte order {}", index.dtype, index.byte_order),
        });
    }
    let bin = path.with_file_name(&index.data_file);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let expected: usize = index
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>() * 4)
        .sum();
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            path: bin,
            expected,
            found: bytes.len(),
        });
    }
    let values = f32_from_bytes(&bytes);
    let mut offset = 0;
    let mut out = Vec::with_capacity(index.tensors.len());
    for e in index.tensors {
        let n: usize = e.shape.iter().product();
        out.push(NamedTensor {
            name: e.name,
            value: Tensor::new(e.shape, values[offset..offset + n].to_vec())?,
        });
        offset += n;
    }
    Ok((out, index.meta))
}
