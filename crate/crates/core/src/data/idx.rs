//! IDX container format (big-endian headers, u8 payloads).

use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{FeloError, Result};
use crate::nn::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let chunk = self.take(4)?;
        Ok(u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .offset
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.offset..end];
                self.offset = end;
                Ok(s)
            }
            None => Err(FeloError::data(format!(
                "{}: truncated at offset {}: need {n} bytes, {} remain",
                self.what,
                self.offset,
                self.bytes.len() - self.offset
            ))),
        }
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let got = self.u32()?;
        if got != expected {
            return Err(FeloError::data(format!(
                "{}: bad magic 0x{got:08x} at offset 0 (expected 0x{expected:08x})",
                self.what
            )));
        }
        Ok(())
    }
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let mut r = Reader {
        bytes,
        offset: 0,
        what: "idx images",
    };
    r.magic(IMAGES_MAGIC)?;
    let count = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let pixels = r.take(count * rows * cols)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader {
        bytes,
        offset: 0,
        what: "idx labels",
    };
    r.magic(LABELS_MAGIC)?;
    let count = r.u32()? as usize;
    Ok(r.take(count)?.to_vec())
}

/// Build a dataset from parsed IDX payloads. Pixels scale to `[0, 1]`; the
/// class count is one more than the largest label.
pub fn dataset_from_idx(images: &IdxImages, labels: &[u8]) -> Result<Dataset> {
    if images.count != labels.len() {
        return Err(FeloError::data(format!(
            "count mismatch: {} images vs {} labels (header offset 4)",
            images.count,
            labels.len()
        )));
    }
    if images.count == 0 || images.rows * images.cols == 0 {
        return Err(FeloError::data("idx file holds no examples"));
    }
    let d_in = images.rows * images.cols;
    let data = images
        .pixels
        .iter()
        .map(|&p| f64::from(p) / 255.0)
        .collect();
    let labels: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Tensor::matrix(images.count, d_in, data)?, labels, n_classes)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let read = |p: &Path| fs::read(p).map_err(|e| FeloError::io(p.display().to_string(), e));
    let images = parse_idx_images(&read(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read(labels_path.as_ref())?)?;
    dataset_from_idx(&images, &labels)
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_idx_images(path: impl AsRef<Path>, images: &IdxImages) -> Result<()> {
    let p = path.as_ref();
    fs::write(p, encode_idx_images(images)).map_err(|e| FeloError::io(p.display().to_string(), e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let p = path.as_ref();
    fs::write(p, encode_idx_labels(labels)).map_err(|e| FeloError::io(p.display().to_string(), e))
}

/// Affinely map real-valued rows onto `0..=255` using the given range, one
/// image per row laid out as `1 × cols`.
pub fn quantize_to_u8(inputs: &Tensor, lo: f64, hi: f64) -> IdxImages {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels = inputs
        .data()
        .iter()
        .map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    IdxImages {
        count: inputs.rows(),
        rows: 1,
        cols: inputs.cols(),
        pixels,
    }
}
