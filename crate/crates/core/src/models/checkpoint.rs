//! Single-file checkpoint archives.
//!
//! A checkpoint is a safetensors file: named arrays plus a string manifest
//! stored in the header's `__metadata__` map. The manifest always carries
//! `variant`, `step`, `seed` and `config_hash`; trainers add their own keys.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, View};
use tch::{Kind, Tensor};

use super::params::ParamStore;
use crate::error::{Error, Result};

struct Raw {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl View for &Raw {
    fn dtype(&self) -> Dtype {
        self.dtype
    }

    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }

    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn to_raw(t: &Tensor) -> Result<Raw> {
    let t = t.detach().contiguous();
    let dtype = match t.kind() {
        Kind::Float => Dtype::F32,
        Kind::Double => Dtype::F64,
        Kind::Int64 => Dtype::I64,
        Kind::Uint8 => Dtype::U8,
        other => return Err(Error::Checkpoint(format!("unsupported tensor kind {other:?}"))),
    };
    let numel = t.numel();
    let mut bytes = vec![0u8; numel * t.kind().elt_size_in_bytes()];
    t.f_copy_data_u8(&mut bytes, numel)?;
    let shape = t.size().iter().map(|&d| d as usize).collect();
    Ok(Raw { dtype, shape, bytes })
}

/// Named tensors plus a string manifest.
#[derive(Debug, Default)]
pub struct Archive {
    pub tensors: BTreeMap<String, Tensor>,
    pub manifest: BTreeMap<String, String>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.insert(name.into(), t.detach().copy());
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.manifest.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.manifest
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("manifest has no {key:?}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("archive has no tensor {name:?}")))
    }

    /// Adds every parameter and buffer of `store` under `prefix/`.
    pub fn insert_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.params().chain(store.buffers()) {
            self.insert(format!("{prefix}/{name}"), t);
        }
    }

    /// Copies `prefix/` entries back into `store`; every entry must exist.
    pub fn restore_store(&self, prefix: &str, store: &ParamStore) -> Result<()> {
        let names: Vec<String> = store.params().chain(store.buffers()).map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = self.tensor(&format!("{prefix}/{name}"))?;
            store.assign(&name, t);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let raws: Vec<(String, Raw)> =
            self.tensors.iter().map(|(k, t)| Ok((k.clone(), to_raw(t)?))).collect::<Result<_>>()?;
        let meta: HashMap<String, String> = self.manifest.clone().into_iter().collect();
        let data = raws.iter().map(|(k, r)| (k.as_str(), r));
        let bytes = safetensors::tensor::serialize(data, &Some(meta))
            .map_err(|e| Error::Checkpoint(format!("serialize: {e:?}")))?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, metadata) = SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e:?}", path.display())))?;
        let manifest = metadata.metadata().clone().unwrap_or_default().into_iter().collect();
        let st = SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e:?}", path.display())))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let kind = match view.dtype() {
                Dtype::F32 => Kind::Float,
                Dtype::F64 => Kind::Double,
                Dtype::I64 => Kind::Int64,
                Dtype::U8 => Kind::Uint8,
                other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?} for {name}"))),
            };
            let shape: Vec<i64> = view.shape().iter().map(|&d| d as i64).collect();
            let t = Tensor::f_from_data_size(view.data(), &shape, kind)?;
            tensors.insert(name, t);
        }
        Ok(Archive { tensors, manifest })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        let mut a = Archive::new();
        let x = Tensor::from_slice(&[1.5f32, -0.0, f32::MIN_POSITIVE]).reshape([3, 1]);
        a.insert("g/x", &x);
        a.insert("step_counts", &Tensor::from_slice(&[7i64]));
        a.set("variant", "ssgan");
        a.set("step", 12);
        a.save(&path).unwrap();

        let b = Archive::load(&path).unwrap();
        assert!(b.tensor("g/x").unwrap().equal(&x));
        assert_eq!(b.tensor("step_counts").unwrap().int64_value(&[0]), 7);
        assert_eq!(b.get("variant").unwrap(), "ssgan");
        assert_eq!(b.get("step").unwrap(), "12");
        assert!(b.get("missing").is_err());
    }
}
