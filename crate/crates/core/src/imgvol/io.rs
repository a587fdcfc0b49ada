//! Two-file volume format: a JSON header next to a raw little-endian payload.
//!
//! ```text
//! name.json  {"dims":[nx,ny,nz],"spacing":[..],"origin":[..],
//!             "dtype":"float32"|"uint8","byte_order":"little",
//!             "unit":"hounsfield"|"normalized","data_file":"name.raw"}
//! name.raw   nx*ny*nz samples, x fastest
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BinaryMask, CtVolume, Grid, SliceImage, SliceLabel, SliceMask, Unit};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    Float32,
    Uint8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::Float32 => 4,
            Dtype::Uint8 => 1,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: Dtype,
    byte_order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    unit: Option<Unit>,
    data_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    volume_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    slice_index: Option<usize>,
}

fn payload_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("raw")
}

fn write_pair(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json = serde_json::to_string_pretty(header)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    let raw = payload_path(path);
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))?;
    Ok(())
}

fn read_pair(path: &Path, expect: Dtype) -> Result<(Header, Grid, Vec<u8>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let format_err = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let header: Header = serde_json::from_str(&text).map_err(|e| format_err(e.to_string()))?;
    if header.dtype != expect {
        return Err(format_err(format!(
            "dtype {:?}, expected {:?}",
            header.dtype, expect
        )));
    }
    if header.byte_order != "little" {
        return Err(format_err(format!("unsupported byte order {:?}", header.byte_order)));
    }
    let grid = Grid {
        dims: header.dims,
        spacing: header.spacing,
        origin: header.origin,
    };
    grid.validate().map_err(|e| format_err(e.to_string()))?;
    let raw = path
        .parent()
        .map(|d| d.join(&header.data_file))
        .unwrap_or_else(|| PathBuf::from(&header.data_file));
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let expected = grid.len() * expect.size();
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            path: raw,
            expected,
            found: bytes.len(),
        });
    }
    Ok((header, grid, bytes))
}

fn data_file_name(path: &Path) -> String {
    payload_path(path)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub(crate) fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn f32_from_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Write a volume; `path` names the JSON header, the payload goes to `path.raw`.
pub fn write_volume(vol: &CtVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let g = vol.grid();
    let header = Header {
        dims: g.dims,
        spacing: g.spacing,
        origin: g.origin,
        dtype: Dtype::Float32,
        byte_order: "little".into(),
        unit: Some(vol.unit()),
        data_file: data_file_name(path),
        volume_id: None,
        slice_index: None,
    };
    write_pair(path, &header, &f32_bytes(vol.data()))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<CtVolume> {
    let path = path.as_ref();
    let (header, grid, bytes) = read_pair(path, Dtype::Float32)?;
    CtVolume::new(grid, header.unit.unwrap_or_default(), f32_from_bytes(&bytes)).map_err(|e| {
        Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    })
}

pub fn write_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let g = mask.grid();
    let header = Header {
        dims: g.dims,
        spacing: g.spacing,
        origin: g.origin,
        dtype: Dtype::Uint8,
        byte_order: "little".into(),
        unit: None,
        data_file: data_file_name(path),
        volume_id: None,
        slice_index: None,
    };
    write_pair(path, &header, mask.data())
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let (_, grid, bytes) = read_pair(path, Dtype::Uint8)?;
    BinaryMask::new(grid, bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// A slice is stored as a one-voxel-deep normalized volume.
pub fn write_slice(slice: &SliceImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        dims: [slice.width, slice.height, 1],
        spacing: [1.0; 3],
        origin: [0.0; 3],
        dtype: Dtype::Float32,
        byte_order: "little".into(),
        unit: Some(Unit::Normalized),
        data_file: data_file_name(path),
        volume_id: Some(slice.provenance.volume_id.clone()),
        slice_index: Some(slice.provenance.slice_index),
    };
    write_pair(path, &header, &f32_bytes(&slice.data))
}

pub fn read_slice(path: impl AsRef<Path>, label: SliceLabel) -> Result<SliceImage> {
    let path = path.as_ref();
    let (header, grid, bytes) = read_pair(path, Dtype::Float32)?;
    if grid.dims[2] != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("slice must be one voxel deep, dims {:?}", grid.dims),
        });
    }
    let slice = SliceImage::new(grid.dims[1], grid.dims[0], f32_from_bytes(&bytes)).map_err(|e| {
        Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    })?;
    Ok(slice
        .with_label(label)
        .with_provenance(header.volume_id.unwrap_or_default(), header.slice_index.unwrap_or(0)))
}

/// Render a slice as 8-bit grayscale, mapping [-1, 1] linearly onto [0, 255].
pub fn write_slice_png(slice: &SliceImage, path: impl AsRef<Path>) -> Result<()> {
    let pixels: Vec<u8> = slice.data.iter().map(|&v| to_gray(v)).collect();
    save_gray(path.as_ref(), slice.width, slice.height, pixels)
}

pub(crate) fn to_gray(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) as f64 + 1.0) * 127.5).round()) as u8
}

pub(crate) fn save_gray(path: &Path, width: usize, height: usize, pixels: Vec<u8>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let img = image::GrayImage::from_raw(width as u32, height as u32, pixels)
        .ok_or_else(|| Error::Shape(format!("png buffer does not match {width}x{height}")))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// Pixels of `mask` with at least one 4-neighbor outside it.
pub(crate) fn contour(mask: &SliceMask) -> SliceMask {
    let (h, w) = (mask.height, mask.width);
    SliceMask::from_fn(h, w, |r, c| {
        mask.get(r, c)
            && (r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1))
    })
}

/// Grayscale overlay: the slice compressed into [32, 223], predicted contour
/// drawn white and ground-truth contour drawn black.
pub fn write_overlay_png(
    slice: &SliceImage,
    pred: &SliceMask,
    truth: Option<&SliceMask>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let (h, w) = (slice.height, slice.width);
    if (pred.height, pred.width) != (h, w) || truth.is_some_and(|t| (t.height, t.width) != (h, w)) {
        return Err(Error::Shape(format!("overlay masks must be {h}x{w}")));
    }
    let mut pixels: Vec<u8> = slice
        .data
        .iter()
        .map(|&v| 32 + ((to_gray(v) as u16 * 191) / 255) as u8)
        .collect();
    if let Some(t) = truth {
        for (p, &on) in pixels.iter_mut().zip(&contour(t).data) {
            if on != 0 {
                *p = 0;
            }
        }
    }
    for (p, &on) in pixels.iter_mut().zip(&contour(pred).data) {
        if on != 0 {
            *p = 255;
        }
    }
    save_gray(path.as_ref(), w, h, pixels)
}

/// One row of a slice manifest. `path` is relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub slice_index: usize,
    pub label: SliceLabel,
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json = serde_json::to_string_pretty(entries)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Read a manifest and load every slice it lists.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(ManifestEntry, SliceImage)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    entries
        .into_iter()
        .map(|e| {
            let slice = read_slice(base.join(&e.path), e.label)?;
            Ok((e, slice))
        })
        .collect()
}
