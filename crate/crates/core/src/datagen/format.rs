//! Binary dataset files (`.fsd`).
//!
//! ```text
//! offset  size      field
//! 0       8         magic "FEDSILO1"
//! 8       2         version (u16 LE) = 1
//! 10      4 x 4     n, C, H, W (u32 LE each)
//! 26      4*n*C*H*W images, f32 LE, row-major [n, C, H, W]
//! ...     n         labels, one byte each (0 or 1)
//! ```
//!
//! The center id and split are not stored; [`load_dataset`] recovers them
//! from the `<root>/center_<k>/<split>.fsd` path convention when present.

use std::fs;
use std::path::{Path, PathBuf};

use crate::datagen::dataset::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"FEDSILO1";
pub const DATASET_VERSION: u16 = 1;
const HEADER_LEN: usize = 8 + 2 + 16;

pub fn encode_dataset(ds: &LabeledDataset) -> Result<Vec<u8>> {
    let shape = ds.images.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + ds.images.len() * 4 + ds.len());
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::DimensionOverflow(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in ds.images.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&ds.labels);
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8], center_id: u32, split: Split) -> Result<LabeledDataset> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[..8] != DATASET_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..8]),
            std::str::from_utf8(DATASET_MAGIC).expect("ascii")
        )));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[10 + 4 * i..14 + 4 * i].try_into().expect("4 bytes")) as u64;
    let (n, c, h, w) = (dim(0), dim(1), dim(2), dim(3));
    let values = n
        .checked_mul(c)
        .and_then(|v| v.checked_mul(h))
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::DimensionOverflow(format!("{n}x{c}x{h}x{w}")))?;
    let expected = values
        .checked_mul(4)
        .and_then(|v| v.checked_add(n))
        .and_then(|v| v.checked_add(HEADER_LEN as u64))
        .ok_or_else(|| Error::DimensionOverflow(format!("{n}x{c}x{h}x{w}")))?;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after labels",
            actual - expected
        )));
    }
    let values = usize::try_from(values).map_err(|_| Error::DimensionOverflow(format!("{values} values")))?;
    let img_end = HEADER_LEN + values * 4;
    let data: Vec<f32> = bytes[HEADER_LEN..img_end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let labels = bytes[img_end..].to_vec();
    let images = Tensor::new(vec![n as usize, c as usize, h as usize, w as usize], data)?;
    LabeledDataset::new(center_id, split, images, labels)
}

pub fn save_dataset(ds: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

/// Reads a dataset file; center id and split come from the path when it
/// follows `center_<k>/<split>.fsd`, otherwise 0 and [`Split::Full`].
pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let (center, split) = origin_from_path(path);
    decode_dataset(&bytes, center, split)
}

fn origin_from_path(path: &Path) -> (u32, Split) {
    let split = path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .unwrap_or(Split::Full);
    let center = path
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|s| s.to_str())
        .and_then(|s| s.strip_prefix("center_"))
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    (center, split)
}

/// `<root>/center_<k>/<split>.fsd`
pub fn dataset_path(root: impl AsRef<Path>, center: u32, split: Split) -> PathBuf {
    root.as_ref()
        .join(format!("center_{center}"))
        .join(format!("{}.fsd", split.as_str()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LabeledDataset {
        let data: Vec<f32> = (0..10 * 3 * 2 * 2).map(|i| (i as f32 * 0.37).sin().abs()).collect();
        let images = Tensor::new(vec![10, 3, 2, 2], data).unwrap();
        let labels = (0..10).map(|i| (i % 3 == 0) as u8).collect();
        LabeledDataset::new(4, Split::Train, images, labels).unwrap()
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample();
        let path = dataset_path(dir.path(), 4, Split::Train);
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.center_id, 4);
        assert_eq!(back.split, Split::Train);
        assert_eq!(back.labels, ds.labels);
        let bits = |d: &LabeledDataset| d.images.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&ds));
        assert_eq!(back.images.shape(), ds.images.shape());
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let mut bytes = encode_dataset(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_dataset(&bytes, 0, Split::Full), Err(Error::Format(_))));
    }

    #[test]
    fn short_payload_reports_byte_counts() {
        let mut bytes = encode_dataset(&sample()).unwrap();
        // declare 12 samples while the payload holds 10
        bytes[10..14].copy_from_slice(&12u32.to_le_bytes());
        let expected = (26 + 12 * 12 * 4 + 12) as u64;
        match decode_dataset(&bytes, 0, Split::Full) {
            Err(Error::Truncated { expected: e, actual }) => {
                assert_eq!(e, expected);
                assert_eq!(actual, bytes.len() as u64);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn huge_dimensions_do_not_overflow() {
        let mut bytes = encode_dataset(&sample()).unwrap();
        for i in 0..4 {
            bytes[10 + 4 * i..14 + 4 * i].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(
            decode_dataset(&bytes, 0, Split::Full),
            Err(Error::DimensionOverflow(_))
        ));
    }
}
