//! CIFAR-10 binary archive reader.
//!
//! Each record is 1 label byte followed by 3072 pixel bytes: the 1024 red
//! values, then green, then blue, each plane in row-major order. Training
//! data is split over `data_batch_1.bin` … `data_batch_5.bin`; the test split
//! is `test_batch.bin`.

use std::path::{Path, PathBuf};

use tch::{Kind, Tensor};

use super::{Dataset, Split};
use crate::error::{Error, Result};

pub const CIFAR10_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR10_CLASSES: i64 = 10;
const TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
const TEST_FILES: [&str; 1] = ["test_batch.bin"];

fn files(split: Split) -> &'static [&'static str] {
    match split {
        Split::Train => &TRAIN_FILES,
        Split::Test => &TEST_FILES,
    }
}

/// Accepts either the directory holding the `.bin` files or its parent
/// (the layout produced by unpacking the official tarball).
fn resolve_root(root: &Path, split: Split) -> Result<PathBuf> {
    for dir in [root.to_path_buf(), root.join("cifar-10-batches-bin")] {
        if files(split).iter().all(|f| dir.join(f).is_file()) {
            return Ok(dir);
        }
    }
    Err(Error::MissingFiles {
        root: root.to_path_buf(),
        expected: files(split).iter().map(|f| f.to_string()).collect(),
    })
}

/// Decodes one split. Pixels map affinely from `0..=255` to `[-1, 1]`.
pub fn load_cifar10(root: &Path, split: Split) -> Result<Dataset> {
    let dir = resolve_root(root, split)?;
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for f in files(split) {
        let path = dir.join(f);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.is_empty() || bytes.len() % CIFAR10_RECORD_BYTES != 0 {
            return Err(Error::Dataset(format!(
                "{}: {} bytes is not a whole number of {CIFAR10_RECORD_BYTES}-byte records",
                path.display(),
                bytes.len()
            )));
        }
        for (i, record) in bytes.chunks_exact(CIFAR10_RECORD_BYTES).enumerate() {
            let label = record[0];
            if i64::from(label) >= CIFAR10_CLASSES {
                return Err(Error::Dataset(format!("{}: record {i} has label byte {label}", path.display())));
            }
            labels.push(i64::from(label));
            pixels.extend_from_slice(&record[1..]);
        }
    }
    let n = labels.len() as i64;
    let images = Tensor::from_slice(&pixels)
        .reshape([n, 3, 32, 32])
        .to_kind(Kind::Float)
        / 127.5
        - 1.0;
    let offset = match split {
        Split::Train => 0,
        // Test records follow the training records in global numbering.
        Split::Test => 50_000,
    };
    Dataset::new(
        "cifar10",
        images,
        Some(Tensor::from_slice(&labels)),
        Some(CIFAR10_CLASSES),
        split,
        offset..offset + n as usize,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..3072).map(fill));
        r
    }

    #[test]
    fn decodes_planar_layout_and_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = record(3, |i| if i < 1024 { 255 } else if i < 2048 { 0 } else { 128 });
        bytes.extend(record(9, |i| (i % 256) as u8));
        std::fs::write(dir.path().join("test_batch.bin"), bytes).unwrap();

        let d = load_cifar10(dir.path(), Split::Test).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(crate::util::to_i64_vec(d.labels.as_ref().unwrap()), vec![3, 9]);
        let first = d.images.get(0);
        assert_eq!(first.get(0).max().double_value(&[]), 1.0);
        assert_eq!(first.get(1).min().double_value(&[]), -1.0);
        let mid = first.get(2).double_value(&[0, 0]);
        assert!((mid - (128.0 / 127.5 - 1.0)).abs() < 1e-6);
        // record 2: red plane row 0 col 1 holds byte 1
        let v = d.images.double_value(&[1, 0, 0, 1]);
        assert!((v - (1.0 / 127.5 - 1.0)).abs() < 1e-6);
        assert_eq!(d.records, 50_000..50_002);
    }

    #[test]
    fn nested_directory_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let inner = dir.path().join("cifar-10-batches-bin");
        std::fs::create_dir(&inner).unwrap();
        std::fs::write(inner.join("test_batch.bin"), record(0, |_| 0)).unwrap();
        assert_eq!(load_cifar10(dir.path(), Split::Test).unwrap().len(), 1);
    }

    #[test]
    fn missing_files_listed() {
        let dir = tempfile::tempdir().unwrap();
        match load_cifar10(dir.path(), Split::Train) {
            Err(Error::MissingFiles { expected, .. }) => {
                assert_eq!(expected.len(), 5);
                assert!(expected.contains(&"data_batch_3.bin".to_string()));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_or_bad_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("test_batch.bin"), vec![0u8; 100]).unwrap();
        assert!(matches!(load_cifar10(dir.path(), Split::Test), Err(Error::Dataset(_))));
        std::fs::write(dir.path().join("test_batch.bin"), record(10, |_| 0)).unwrap();
        assert!(matches!(load_cifar10(dir.path(), Split::Test), Err(Error::Dataset(_))));
    }
}
