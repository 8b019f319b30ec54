use tch::Tensor;

use super::params::{orthogonal, unit_vector, ParamStore};
use super::spectral::{power_iteration, sigma, SpectralNormState};

/// Creates parameters in a [`ParamStore`] with deterministic, name-keyed
/// initial values.
pub struct LayerBuilder<'a> {
    pub store: &'a mut ParamStore,
    pub seed: u64,
    pub spectral_norm: bool,
}

impl LayerBuilder<'_> {
    pub fn linear(&mut self, name: &str, d_in: i64, d_out: i64, bias: bool) -> Linear {
        let w = format!("{name}.weight");
        self.store.add_param(&w, orthogonal(self.seed, &w, d_out as usize, d_in as usize));
        let b = bias.then(|| {
            let b = format!("{name}.bias");
            self.store.add_param(&b, Tensor::zeros([d_out], (self.store.kind(), tch::Device::Cpu)));
            b
        });
        self.register_spectral(&w, d_out);
        Linear { weight: w, bias: b, spectral: self.spectral_norm }
    }

    pub fn conv(&mut self, name: &str, c_in: i64, c_out: i64, kernel: i64) -> Conv2d {
        let w = format!("{name}.weight");
        let fan_in = (c_in * kernel * kernel) as usize;
        let init = orthogonal(self.seed, &w, c_out as usize, fan_in).reshape([c_out, c_in, kernel, kernel]);
        self.store.add_param(&w, init);
        let b = format!("{name}.bias");
        self.store.add_param(&b, Tensor::zeros([c_out], (self.store.kind(), tch::Device::Cpu)));
        self.register_spectral(&w, c_out);
        Conv2d { weight: w, bias: b, padding: kernel / 2, spectral: self.spectral_norm }
    }

    /// Class embedding table `[num_classes, dim]`, orthogonally initialised.
    pub fn embedding(&mut self, name: &str, num_classes: i64, dim: i64) -> Embedding {
        let w = format!("{name}.weight");
        self.store.add_param(&w, orthogonal(self.seed, &w, num_classes as usize, dim as usize));
        self.register_spectral(&w, num_classes);
        Embedding { weight: w, spectral: self.spectral_norm }
    }

    /// Embedding table filled with a constant (conditional batch-norm gains).
    pub fn constant_table(&mut self, name: &str, rows: i64, cols: i64, value: f64) -> Embedding {
        let w = format!("{name}.weight");
        let t = Tensor::full([rows, cols], value, (self.store.kind(), tch::Device::Cpu));
        self.store.add_param(&w, t);
        Embedding { weight: w, spectral: false }
    }

    fn register_spectral(&mut self, weight: &str, rows: i64) {
        if !self.spectral_norm {
            return;
        }
        let u = unit_vector(self.seed, &format!("{weight}.sn_u"), rows as usize);
        let state = SpectralNormState::from_u(self.store.param(weight), u.to_kind(self.store.kind()));
        self.store.add_buffer(&format!("{weight}.sn_u"), state.u);
        self.store.add_buffer(&format!("{weight}.sn_v"), state.v);
        self.store.mark_spectral(weight);
    }
}

pub fn sn_state(store: &ParamStore, weight: &str) -> SpectralNormState {
    SpectralNormState {
        u: store.buffer(&format!("{weight}.sn_u")).shallow_clone(),
        v: store.buffer(&format!("{weight}.sn_v")).shallow_clone(),
    }
}

/// Weight as used in the forward pass: `W / σ̂` under spectral norm.
fn effective(store: &ParamStore, weight: &str, spectral: bool) -> Tensor {
    let w = store.param(weight);
    if spectral {
        w / sigma(w, &sn_state(store, weight))
    } else {
        w.shallow_clone()
    }
}

/// One power-iteration update of every spectrally normalized weight.
pub fn refresh_spectral_norm(store: &ParamStore, iterations: usize) {
    for weight in store.spectral_weights() {
        let next = power_iteration(store.param(weight), &sn_state(store, weight), iterations);
        store.assign(&format!("{weight}.sn_u"), &next.u);
        store.assign(&format!("{weight}.sn_v"), &next.v);
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    spectral: bool,
}

impl Linear {
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let w = effective(store, &self.weight, self.spectral);
        let bias = self.bias.as_ref().map(|b| store.param(b));
        x.linear(&w, bias)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    padding: i64,
    spectral: bool,
}

impl Conv2d {
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let w = effective(store, &self.weight, self.spectral);
        x.conv2d(&w, Some(store.param(&self.bias)), [1, 1], [self.padding, self.padding], [1, 1], 1)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub weight: String,
    spectral: bool,
}

impl Embedding {
    pub fn table(&self, store: &ParamStore) -> Tensor {
        effective(store, &self.weight, self.spectral)
    }

    pub fn forward(&self, store: &ParamStore, labels: &Tensor) -> Tensor {
        self.table(store).index_select(0, labels)
    }
}
