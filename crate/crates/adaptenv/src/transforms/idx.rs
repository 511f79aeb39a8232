//! IDX (MNIST) binary format parsing and file ingestion.
//!
//! Big-endian header: magic, then one u32 per dimension, then the payload.
//! Only the two magics the MNIST files use are accepted: `0x00000803`
//! (uint8, 3-D image tensor) and `0x00000801` (uint8, 1-D label vector).

use crate::error::{Error, Result};
use byteorder::{BigEndian, ReadBytesExt};
use ndarray::Array3;
use sha2::{Digest, Sha256};
use std::io::Read;
use std::path::Path;

const MAGIC_IMAGES: u32 = 0x0000_0803;
const MAGIC_LABELS: u32 = 0x0000_0801;

/// A parsed IDX payload.
#[derive(Debug, Clone)]
pub enum IdxTensor {
    /// Image tensor `(n, rows, cols)` rescaled to `[0, 1]`.
    Images(Array3<f32>),
    /// Label vector.
    Labels(Vec<u8>),
}

/// Parse a raw (non-compressed) IDX byte stream.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    let mut cur = std::io::Cursor::new(bytes);
    let magic = cur
        .read_u32::<BigEndian>()
        .map_err(|_| Error::format("IDX stream shorter than magic number"))?;
    match magic {
        MAGIC_IMAGES => {
            let n = read_dim(&mut cur)?;
            let rows = read_dim(&mut cur)?;
            let cols = read_dim(&mut cur)?;
            let expected = n
                .checked_mul(rows)
                .and_then(|v| v.checked_mul(cols))
                .ok_or_else(|| Error::format("IDX dimensions overflow"))?;
            let payload = &bytes[cur.position() as usize..];
            if payload.len() != expected {
                return Err(Error::format(format!(
                    "IDX image payload holds {} bytes, header promises {}",
                    payload.len(),
                    expected
                )));
            }
            let data = Array3::from_shape_vec(
                (n, rows, cols),
                payload.iter().map(|&b| b as f32 / 255.0).collect(),
            )
            .expect("shape checked above");
            Ok(IdxTensor::Images(data))
        }
        MAGIC_LABELS => {
            let n = read_dim(&mut cur)?;
            let payload = &bytes[cur.position() as usize..];
            if payload.len() != n {
                return Err(Error::format(format!(
                    "IDX label payload holds {} bytes, header promises {}",
                    payload.len(),
                    n
                )));
            }
            Ok(IdxTensor::Labels(payload.to_vec()))
        }
        other => Err(Error::format(format!(
            "unsupported IDX magic 0x{other:08x}"
        ))),
    }
}

fn read_dim(cur: &mut std::io::Cursor<&[u8]>) -> Result<usize> {
    cur.read_u32::<BigEndian>()
        .map(|d| d as usize)
        .map_err(|_| Error::format("IDX header truncated"))
}

/// Read an IDX file from disk, transparently decompressing gzip.
pub fn load_idx_file(path: &Path) -> Result<IdxTensor> {
    let raw = std::fs::read(path)?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(format!("gzip decode of {}: {e}", path.display())))?;
        out
    } else {
        raw
    };
    parse_idx(&bytes)
}

/// Hex-encoded SHA-256 digest of a file.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_header(n: u32, rows: u32, cols: u32) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&MAGIC_IMAGES.to_be_bytes());
        v.extend_from_slice(&n.to_be_bytes());
        v.extend_from_slice(&rows.to_be_bytes());
        v.extend_from_slice(&cols.to_be_bytes());
        v
    }

    #[test]
    fn parses_image_tensor() {
        let mut bytes = image_header(2, 28, 28);
        bytes.extend(std::iter::repeat(128u8).take(2 * 28 * 28));
        match parse_idx(&bytes).unwrap() {
            IdxTensor::Images(t) => {
                assert_eq!(t.dim(), (2, 28, 28));
                assert!((t[[0, 0, 0]] - 128.0 / 255.0).abs() < 1e-7);
            }
            _ => panic!("expected images"),
        }
    }

    #[test]
    fn parses_label_vector() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC_LABELS.to_be_bytes());
        bytes.extend_from_slice(&5u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 1, 2, 3, 4]);
        match parse_idx(&bytes).unwrap() {
            IdxTensor::Labels(v) => assert_eq!(v, vec![0, 1, 2, 3, 4]),
            _ => panic!("expected labels"),
        }
    }

    #[test]
    fn empty_stream_is_format_error() {
        assert!(matches!(parse_idx(&[]), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let bytes = 0xdeadbeefu32.to_be_bytes();
        assert!(matches!(parse_idx(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let mut bytes = image_header(2, 28, 28);
        bytes.extend(std::iter::repeat(0u8).take(100));
        assert!(matches!(parse_idx(&bytes), Err(Error::Format(_))));
    }
}
