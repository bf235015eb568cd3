//! IDX files (the MNIST distribution format).

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, WriteBytesExt};

use super::{Dataset, SampleShape};
use crate::autodiff::Tensor;
use crate::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let need = 4 + 4 * dims;
    if bytes.len() < need {
        return Err(format_err(path, "file shorter than its header"));
    }
    let found = BigEndian::read_u32(&bytes[..4]);
    if found != magic {
        return Err(format_err(
            path,
            format!("magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    Ok((0..dims)
        .map(|i| BigEndian::read_u32(&bytes[4 + 4 * i..8 + 4 * i]) as usize)
        .collect())
}

/// Returns `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let dims = header(path, &bytes, IMAGES_MAGIC, 3)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let payload = &bytes[16..];
    let expected = n * h * w;
    if payload.len() != expected {
        return Err(format_err(
            path,
            format!(
                "header promises {expected} pixel bytes, found {}",
                payload.len()
            ),
        ));
    }
    Ok((n, h, w, payload.to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    let dims = header(path, &bytes, LABELS_MAGIC, 1)?;
    let payload = &bytes[8..];
    if payload.len() != dims[0] {
        return Err(format_err(
            path,
            format!(
                "header promises {} labels, found {}",
                dims[0],
                payload.len()
            ),
        ));
    }
    Ok(payload.to_vec())
}

/// Loads an image/label pair with pixels scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, h, w, pixels) = read_idx_images(images)?;
    let ys = read_idx_labels(labels)?;
    if ys.len() != n {
        return Err(format_err(
            labels,
            format!("{} labels for {n} images", ys.len()),
        ));
    }
    let labels: Vec<usize> = ys.iter().map(|&y| y as usize).collect();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let features = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let name = images
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(
        name,
        Tensor::new(vec![n, h * w], features)?,
        labels,
        n_classes,
        SampleShape::Image {
            channels: 1,
            height: h,
            width: w,
        },
    )
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let n = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.write_u32::<BigEndian>(IMAGES_MAGIC)?;
    for d in [n, rows, cols] {
        out.write_u32::<BigEndian>(d as u32)?;
    }
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.write_u32::<BigEndian>(LABELS_MAGIC)?;
    out.write_u32::<BigEndian>(labels.len() as u32)?;
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}
