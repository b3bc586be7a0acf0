//! IDX image/label file parsing (the MNIST container format) and a fixture
//! writer for round-trip tests.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::bytes::ByteReader;
use crate::error::{Error, Result};
use crate::harness::data::{LabeledDataset, Provenance};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Loads an IDX image/label pair into a dataset with pixels scaled by 1/255.
///
/// Dimensions are big-endian per the IDX convention. The class count is the
/// largest label plus one.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let (n_images, rows, cols, pixels) = read_idx_images(&std::fs::read(images_path)?)?;
    let labels = read_idx_labels(&std::fs::read(labels_path)?)?;
    if n_images != labels.len() {
        return Err(Error::Parse {
            offset: 4,
            msg: format!(
                "image file holds {n_images} examples but label file holds {}",
                labels.len()
            ),
        });
    }
    let d = rows * cols;
    let mut inputs = Array2::<f64>::zeros((n_images, d));
    for i in 0..n_images {
        for j in 0..d {
            inputs[[i, j]] = pixels[i * d + j] as f64 / 255.0;
        }
    }
    let class_count = labels.iter().copied().max().map(|m| m as usize + 1).unwrap_or(1);
    LabeledDataset::new(
        inputs,
        labels.into_iter().map(|l| l as usize).collect(),
        class_count,
        Provenance::IdxFile,
    )
}

fn read_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut r = ByteReader::new(bytes.to_vec());
    let offset = r.position();
    let magic = r.read_u32_be("magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Parse {
            offset,
            msg: format!("image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        });
    }
    let n = r.read_u32_be("image count")? as usize;
    let rows = r.read_u32_be("row count")? as usize;
    let cols = r.read_u32_be("column count")? as usize;
    let pixels = r.read_bytes(n * rows * cols, "pixel data")?.to_vec();
    r.expect_eof("image data")?;
    Ok((n, rows, cols, pixels))
}

fn read_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = ByteReader::new(bytes.to_vec());
    let offset = r.position();
    let magic = r.read_u32_be("magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Parse {
            offset,
            msg: format!("label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        });
    }
    let n = r.read_u32_be("label count")? as usize;
    let labels = r.read_bytes(n, "label data")?.to_vec();
    r.expect_eof("label data")?;
    Ok(labels)
}

/// Serializes raw pixels in the IDX image layout.
pub fn idx_image_bytes(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != n * rows * cols {
        return Err(Error::dim(format!(
            "{} pixels given, {n}x{rows}x{cols} needs {}",
            pixels.len(),
            n * rows * cols
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Serializes labels in the IDX label layout.
pub fn idx_label_bytes(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_idx_images(path: &Path, n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let bytes = idx_image_bytes(n, rows, cols, pixels)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    std::fs::File::create(path)?.write_all(&idx_label_bytes(labels))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("img.idx");
        let lbl_path = dir.path().join("lbl.idx");
        write_idx_images(&img_path, 1, 28, 28, &[0u8; 28 * 28]).unwrap();
        write_idx_labels(&lbl_path, &[3]).unwrap();
        let data = load_idx(&img_path, &lbl_path).unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data.dim(), 28 * 28);
        assert!(data.inputs.iter().all(|&v| v == 0.0));
        assert_eq!(data.labels[0], 3);
        assert_eq!(data.class_count, 4);
        assert_eq!(data.provenance, Provenance::IdxFile);
    }

    #[test]
    fn roundtrip_bit_exact() {
        let pixels: Vec<u8> = (0..2 * 3 * 4).map(|i| (i * 7 % 256) as u8).collect();
        let bytes = idx_image_bytes(2, 3, 4, &pixels).unwrap();
        let (n, rows, cols, back) = read_idx_images(&bytes).unwrap();
        let rewritten = idx_image_bytes(n, rows, cols, &back).unwrap();
        assert_eq!(bytes, rewritten);

        let lbl = idx_label_bytes(&[1, 2, 9]);
        let back = read_idx_labels(&lbl).unwrap();
        assert_eq!(idx_label_bytes(&back), lbl);
    }

    #[test]
    fn count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("img.idx");
        let lbl_path = dir.path().join("lbl.idx");
        write_idx_images(&img_path, 2, 2, 2, &[0u8; 8]).unwrap();
        write_idx_labels(&lbl_path, &[1]).unwrap();
        assert!(matches!(
            load_idx(&img_path, &lbl_path),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn wrong_magic_rejected_with_offset() {
        let mut bytes = idx_image_bytes(1, 2, 2, &[0u8; 4]).unwrap();
        bytes[3] = 0x01; // labels magic in an image file
        match read_idx_images(&bytes) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = idx_image_bytes(1, 2, 2, &[7u8; 4]).unwrap();
        match read_idx_images(&bytes[..bytes.len() - 1]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
