//! Dataset cache: `manifest.json` plus raw little-endian blobs
//! (`images.f32`, and `labels.i64` for labeled data).

use std::path::Path;

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use super::{Dataset, Split};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    name: String,
    split: Split,
    shape: [i64; 4],
    num_classes: Option<i64>,
    record_start: usize,
    version: String,
}

fn raw_bytes(t: &Tensor) -> Vec<u8> {
    let t = t.contiguous();
    let numel = t.numel();
    let mut buf = vec![0u8; numel * t.kind().elt_size_in_bytes()];
    t.copy_data_u8(&mut buf, numel);
    buf
}

pub fn save_cached(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = dataset.images.size();
    let manifest = Manifest {
        name: dataset.name.clone(),
        split: dataset.split,
        shape: [s[0], s[1], s[2], s[3]],
        num_classes: dataset.num_classes,
        record_start: dataset.records.start,
        version: dataset.version_hash(),
    };
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    write("images.f32", &raw_bytes(&dataset.images.to_kind(Kind::Float)))?;
    if let Some(l) = &dataset.labels {
        write("labels.i64", &raw_bytes(l))?;
    }
    write("manifest.json", serde_json::to_string_pretty(&manifest)?.as_bytes())
}

/// Loads a cache and verifies its content hash against the manifest.
pub fn load_cached(dir: &Path) -> Result<Dataset> {
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let manifest: Manifest = serde_json::from_slice(&read("manifest.json")?)?;
    let images = Tensor::f_from_data_size(&read("images.f32")?, &manifest.shape, Kind::Float)?;
    let labels = match manifest.num_classes {
        Some(_) if dir.join("labels.i64").exists() => {
            Some(Tensor::f_from_data_size(&read("labels.i64")?, &[manifest.shape[0]], Kind::Int64)?)
        }
        _ => None,
    };
    let n = manifest.shape[0] as usize;
    let d = Dataset::new(
        manifest.name,
        images,
        labels,
        manifest.num_classes,
        manifest.split,
        manifest.record_start..manifest.record_start + n,
    )?;
    if d.version_hash() != manifest.version {
        return Err(Error::Dataset(format!("{}: content hash does not match manifest", dir.display())));
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_shapes;

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = make_synthetic_shapes(12, 8, 2).unwrap();
        save_cached(&d, dir.path()).unwrap();
        let back = load_cached(dir.path()).unwrap();
        assert!(back.images.equal(&d.images));
        assert_eq!(back.version_hash(), d.version_hash());
        assert_eq!(back.num_classes, Some(10));
    }

    #[test]
    fn tampered_cache_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let d = make_synthetic_shapes(4, 8, 2).unwrap();
        save_cached(&d, dir.path()).unwrap();
        let mut bytes = std::fs::read(dir.path().join("images.f32")).unwrap();
        bytes[0] ^= 1;
        std::fs::write(dir.path().join("images.f32"), bytes).unwrap();
        assert!(load_cached(dir.path()).is_err());
    }
}
