//! IDX files: big-endian, unsigned-byte payloads.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::DomainDataset;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| format_err(path, "truncated header"))
}

/// Images as a `count × (rows·cols)` matrix with pixels scaled to `[0, 1]`.
pub fn read_idx_images(path: &Path) -> Result<(Tensor<f64>, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(
            path,
            format!("image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let per = rows
        .checked_mul(cols)
        .filter(|&p| p > 0)
        .ok_or_else(|| format_err(path, "invalid image dimensions"))?;
    let need = count
        .checked_mul(per)
        .ok_or_else(|| format_err(path, "size overflow"))?;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(format_err(
            path,
            format!("truncated payload: {} of {need} bytes", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(format_err(path, format!("{} trailing bytes", payload.len() - need)));
    }
    if count == 0 {
        return Err(format_err(path, "no images"));
    }
    let data = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Ok((Tensor::new(vec![count, per], data)?, rows, cols))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(
            path,
            format!("label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(format_err(
            path,
            format!("header announces {count} labels, payload has {}", payload.len()),
        ));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Labeled image dataset; the class count is `max(label) + 1` (at least 2).
pub fn read_idx(images: &Path, labels: &Path) -> Result<DomainDataset> {
    let (features, _, _) = read_idx_images(images)?;
    let labels_v = read_idx_labels(labels)?;
    if labels_v.len() != features.shape()[0] {
        return Err(format_err(
            labels,
            format!("{} labels for {} images", labels_v.len(), features.shape()[0]),
        ));
    }
    let classes = labels_v.iter().max().map_or(2, |&m| (m + 1).max(2));
    let name = images
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    DomainDataset::new(features, Some(labels_v), classes, 0, name)
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let per = rows * cols;
    if per == 0 || !pixels.len().is_multiple_of(per) {
        return Err(Error::invalid("pixel buffer is not a whole number of images"));
    }
    let mut buf = Vec::with_capacity(16 + pixels.len());
    buf.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    buf.extend_from_slice(&((pixels.len() / per) as u32).to_be_bytes());
    buf.extend_from_slice(&(rows as u32).to_be_bytes());
    buf.extend_from_slice(&(cols as u32).to_be_bytes());
    buf.extend_from_slice(pixels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + labels.len());
    buf.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        let b = u8::try_from(l).map_err(|_| Error::invalid(format!("label {l} does not fit a byte")))?;
        buf.push(b);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
