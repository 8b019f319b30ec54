use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use tch::{Kind, Tensor};

use crate::util::{keyed_rng, tensors_digest};

/// Named trainable tensors plus non-trainable buffers, in name order.
#[derive(Debug)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
    /// Weight names that are spectrally normalized; their power-iteration
    /// vectors live in `buffers` under `<name>.sn_u` / `<name>.sn_v`.
    spectral: Vec<String>,
    kind: Kind,
}

impl ParamStore {
    pub fn new(kind: Kind) -> Self {
        ParamStore { params: BTreeMap::new(), buffers: BTreeMap::new(), spectral: Vec::new(), kind }
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn add_param(&mut self, name: &str, value: Tensor) {
        let t = value.to_kind(self.kind).detach().set_requires_grad(true);
        let prev = self.params.insert(name.to_string(), t);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) {
        let prev = self.buffers.insert(name.to_string(), value.to_kind(self.kind).detach());
        assert!(prev.is_none(), "duplicate buffer {name}");
    }

    pub(crate) fn mark_spectral(&mut self, weight: &str) {
        self.spectral.push(weight.to_string());
    }

    pub fn spectral_weights(&self) -> &[String] {
        &self.spectral
    }

    pub fn param(&self, name: &str) -> &Tensor {
        self.params.get(name).unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn buffer(&self, name: &str) -> &Tensor {
        self.buffers.get(name).unwrap_or_else(|| panic!("no buffer named {name}"))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn trainable(&self) -> Vec<&Tensor> {
        self.params.values().collect()
    }

    pub fn num_parameters(&self) -> i64 {
        self.params.values().map(|t| t.numel() as i64).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name) || self.buffers.contains_key(name)
    }

    /// Overwrites a parameter or buffer in place, keeping its identity.
    pub fn assign(&self, name: &str, value: &Tensor) {
        let target = self
            .params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .unwrap_or_else(|| panic!("no tensor named {name}"));
        tch::no_grad(|| {
            let mut dst = target.shallow_clone();
            dst.copy_(&value.to_kind(self.kind));
        });
    }

    /// Converts every tensor to `kind`; used for double-precision checks.
    pub fn set_kind(&mut self, kind: Kind) {
        self.kind = kind;
        for t in self.params.values_mut() {
            *t = t.detach().to_kind(kind).set_requires_grad(true);
        }
        for t in self.buffers.values_mut() {
            *t = t.detach().to_kind(kind);
        }
    }

    /// Content hash of parameters and buffers.
    pub fn digest(&self) -> String {
        tensors_digest(self.params().chain(self.buffers()))
    }

    pub fn deep_clone(&self) -> ParamStore {
        let copy = |m: &BTreeMap<String, Tensor>, grad: bool| {
            m.iter()
                .map(|(k, v)| {
                    let t = v.detach().copy();
                    (k.clone(), if grad { t.set_requires_grad(true) } else { t })
                })
                .collect()
        };
        ParamStore {
            params: copy(&self.params, true),
            buffers: copy(&self.buffers, false),
            spectral: self.spectral.clone(),
            kind: self.kind,
        }
    }
}

/// Orthogonal matrix of shape `[rows, cols]` drawn from the stream keyed by
/// `(seed, name)`, so each tensor's initial value is independent of which
/// other tensors exist.
pub fn orthogonal(seed: u64, name: &str, rows: usize, cols: usize) -> Tensor {
    let mut rng = keyed_rng(seed, &format!("init/{name}"));
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let a = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let q = if rows >= cols { q } else { q.transpose() };
    // nalgebra is column-major; emit row-major.
    let data: Vec<f64> = (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).map(|(i, j)| q[(i, j)]).collect();
    Tensor::from_slice(&data).reshape([rows as i64, cols as i64])
}

/// Unit-norm standard-normal vector from the keyed stream.
pub fn unit_vector(seed: u64, name: &str, len: usize) -> Tensor {
    let mut rng = keyed_rng(seed, &format!("init/{name}"));
    let v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    Tensor::from_slice(&v.iter().map(|x| x / norm).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_rows_or_columns() {
        for (r, c) in [(5, 3), (3, 5), (4, 4)] {
            let w = orthogonal(3, "w", r, c);
            let gram = if r >= c { w.transpose(0, 1).matmul(&w) } else { w.matmul(&w.transpose(0, 1)) };
            let k = r.min(c) as i64;
            let eye = Tensor::eye(k, (Kind::Double, tch::Device::Cpu));
            assert!(gram.allclose(&eye, 1e-10, 1e-10, false));
        }
    }

    #[test]
    fn init_keyed_by_name() {
        let a = orthogonal(1, "a", 3, 3);
        assert!(a.equal(&orthogonal(1, "a", 3, 3)));
        assert!(!a.equal(&orthogonal(1, "b", 3, 3)));
        assert!(!a.equal(&orthogonal(2, "a", 3, 3)));
    }

    #[test]
    fn assign_keeps_identity() {
        let mut store = ParamStore::new(Kind::Float);
        store.add_param("w", Tensor::zeros([2], (Kind::Float, tch::Device::Cpu)));
        let handle = store.param("w").shallow_clone();
        store.assign("w", &Tensor::from_slice(&[1.0f32, 2.0]));
        assert_eq!(Vec::<f32>::try_from(&handle).unwrap(), vec![1.0, 2.0]);
        assert!(handle.requires_grad());
    }
}
