//! IDX image/label file ingestion (the MNIST container format).
//!
//! Big-endian headers: images carry magic 0x00000803 with count/rows/cols,
//! labels carry magic 0x00000801 with count. Pixels are scaled to [0, 1];
//! on-disk labels are 0-based and become 1-based [`ClassLabel`]s.

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use fedssl_core::data::Sample;
use fedssl_core::nn::ClassLabel;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: bad magic at byte 0: expected {expected:#010x}, found {found:#010x}", path.display())]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{}: truncated at byte offset {offset}: needed {needed} more bytes", path.display())]
    Truncated { path: PathBuf, offset: usize, needed: usize },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{}: label {label} at byte offset {offset} out of range for {classes} classes", path.display())]
    LabelOutOfRange { path: PathBuf, offset: usize, label: u8, classes: u32 },
}

#[derive(Debug)]
pub struct IdxData {
    pub samples: Vec<Sample>,
    pub rows: usize,
    pub cols: usize,
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IdxError> {
        if self.bytes.len() - self.offset < n {
            return Err(IdxError::Truncated {
                path: self.path.to_path_buf(),
                offset: self.offset,
                needed: n - (self.bytes.len() - self.offset),
            });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32_be(&mut self) -> Result<u32, IdxError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Loads an image/label pair, scaling pixels to [0, 1] and validating every
/// label against `classes`.
pub fn load_idx(images: &Path, labels: &Path, classes: u32) -> Result<IdxData, IdxError> {
    let image_bytes = std::fs::read(images)
        .map_err(|source| IdxError::Io { path: images.to_path_buf(), source })?;
    let label_bytes = std::fs::read(labels)
        .map_err(|source| IdxError::Io { path: labels.to_path_buf(), source })?;

    let mut ir = Reader { bytes: &image_bytes, offset: 0, path: images };
    let magic = ir.u32_be()?;
    if magic != IMAGE_MAGIC {
        return Err(IdxError::BadMagic { path: images.to_path_buf(), expected: IMAGE_MAGIC, found: magic });
    }
    let count = ir.u32_be()? as usize;
    let rows = ir.u32_be()? as usize;
    let cols = ir.u32_be()? as usize;

    let mut lr = Reader { bytes: &label_bytes, offset: 0, path: labels };
    let magic = lr.u32_be()?;
    if magic != LABEL_MAGIC {
        return Err(IdxError::BadMagic { path: labels.to_path_buf(), expected: LABEL_MAGIC, found: magic });
    }
    let label_count = lr.u32_be()? as usize;
    if count != label_count {
        return Err(IdxError::CountMismatch { images: count, labels: label_count });
    }

    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let pixels = ir.take(rows * cols)?;
        let label_offset = lr.offset;
        let raw = lr.take(1)?[0];
        if u32::from(raw) >= classes {
            return Err(IdxError::LabelOutOfRange {
                path: labels.to_path_buf(),
                offset: label_offset,
                label: raw,
                classes,
            });
        }
        samples.push(Sample {
            features: pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
            label: ClassLabel::from_index(raw as usize),
        });
    }
    Ok(IdxData { samples, rows, cols })
}

/// Serializes an image/label pair in IDX format (test fixtures and dataset
/// export).
pub fn encode_idx(images: &[Vec<u8>], labels: &[u8], rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
    let mut image_bytes = Vec::with_capacity(16 + images.len() * rows * cols);
    image_bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    image_bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for img in images {
        image_bytes.extend_from_slice(img);
    }
    let mut label_bytes = Vec::with_capacity(8 + labels.len());
    label_bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    label_bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    label_bytes.extend_from_slice(labels);
    (image_bytes, label_bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_pair(images: &[u8], labels: &[u8]) -> (tempfile::NamedTempFile, tempfile::NamedTempFile) {
        let mut fi = tempfile::NamedTempFile::new().unwrap();
        fi.write_all(images).unwrap();
        let mut fl = tempfile::NamedTempFile::new().unwrap();
        fl.write_all(labels).unwrap();
        (fi, fl)
    }

    #[test]
    fn hand_crafted_two_image_fixture_loads_exactly() {
        let (ib, lb) = encode_idx(&[vec![0, 51, 102, 255], vec![255, 204, 153, 0]], &[3, 7], 2, 2);
        let (fi, fl) = write_pair(&ib, &lb);
        let data = load_idx(fi.path(), fl.path(), 10).unwrap();
        assert_eq!((data.rows, data.cols), (2, 2));
        assert_eq!(data.samples.len(), 2);
        assert_eq!(data.samples[0].features, vec![0.0, 51.0 / 255.0, 102.0 / 255.0, 1.0]);
        assert_eq!(data.samples[0].label, ClassLabel::from_index(3));
        assert_eq!(data.samples[1].label, ClassLabel::from_index(7));
    }

    #[test]
    fn empty_count_pair_is_an_empty_sequence() {
        let (ib, lb) = encode_idx(&[], &[], 2, 2);
        let (fi, fl) = write_pair(&ib, &lb);
        let data = load_idx(fi.path(), fl.path(), 10).unwrap();
        assert!(data.samples.is_empty());
    }

    #[test]
    fn out_of_range_label_is_rejected_with_its_offset() {
        let (ib, lb) = encode_idx(&[vec![0; 4], vec![0; 4]], &[1, 255], 2, 2);
        let (fi, fl) = write_pair(&ib, &lb);
        let err = load_idx(fi.path(), fl.path(), 10).unwrap_err();
        match err {
            IdxError::LabelOutOfRange { offset, label, classes, .. } => {
                assert_eq!(offset, 9); // 8-byte header + second label
                assert_eq!(label, 255);
                assert_eq!(classes, 10);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn bad_magic_and_truncation_are_reported() {
        let (ib, lb) = encode_idx(&[vec![0; 4]], &[1], 2, 2);

        let mut wrong = ib.clone();
        wrong[3] = 0x01;
        let (fi, fl) = write_pair(&wrong, &lb);
        assert!(matches!(load_idx(fi.path(), fl.path(), 10), Err(IdxError::BadMagic { .. })));

        let (fi, fl) = write_pair(&ib[..ib.len() - 2], &lb);
        match load_idx(fi.path(), fl.path(), 10).unwrap_err() {
            IdxError::Truncated { offset, needed, .. } => {
                assert_eq!(offset, 16);
                assert_eq!(needed, 2);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let (ib, _) = encode_idx(&[vec![0; 4], vec![0; 4]], &[], 2, 2);
        let (_, lb) = encode_idx(&[], &[1], 2, 2);
        let (fi, fl) = write_pair(&ib, &lb);
        assert!(matches!(
            load_idx(fi.path(), fl.path(), 10),
            Err(IdxError::CountMismatch { images: 2, labels: 1 })
        ));
    }
}
