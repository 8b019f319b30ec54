//! Python bindings. Images cross the boundary as `float32` NCHW numpy arrays
//! and labels as `int64`; structured results come back as plain dicts.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use numpy::ndarray::{ArrayD, IxDyn};
use numpy::{IntoPyArray, PyArrayDyn, PyReadonlyArrayDyn, PyUntypedArrayMethods};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyAny;
use ssgan::data::SyntheticShapes;
use ssgan::forgetting::{run_forgetting_experiment, ForgettingConfig, ForgettingVariant};
use ssgan::losses::{self, LossFamily, LossWeights, RotationLogits};
use ssgan::metrics::{self, GaussianStats};
use ssgan::probes::{probe_all_blocks, ProbeConfig};
use ssgan::rotation::{self, Source};
use ssgan::trainer::{self, list_checkpoints, RunOptions, SsGANConfig, TrainState};
use tch::{Kind, Tensor};

fn py_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_tensor_f32(a: &PyReadonlyArrayDyn<f32>) -> Tensor {
    let shape: Vec<i64> = a.shape().iter().map(|&d| d as i64).collect();
    let data: Vec<f32> = a.as_array().iter().copied().collect();
    Tensor::from_slice(&data).reshape(&shape)
}

fn to_tensor_i64(a: &PyReadonlyArrayDyn<i64>) -> Tensor {
    let data: Vec<i64> = a.as_array().iter().copied().collect();
    Tensor::from_slice(&data)
}

fn to_array_f32<'py>(py: Python<'py>, t: &Tensor) -> PyResult<Bound<'py, PyArrayDyn<f32>>> {
    let shape: Vec<usize> = t.size().iter().map(|&d| d as usize).collect();
    let data = Vec::<f32>::try_from(t.to_kind(Kind::Float).contiguous().view(-1)).map_err(py_err)?;
    Ok(ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(py_err)?.into_pyarray(py))
}

fn to_array_i64<'py>(py: Python<'py>, t: &Tensor) -> PyResult<Bound<'py, PyArrayDyn<i64>>> {
    let data = Vec::<i64>::try_from(t.to_kind(Kind::Int64).contiguous().view(-1)).map_err(py_err)?;
    Ok(ArrayD::from_shape_vec(IxDyn(&[data.len()]), data).map_err(py_err)?.into_pyarray(py))
}

fn to_py_object<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(py_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn family(name: &str) -> PyResult<LossFamily> {
    match name {
        "cross_entropy" | "ce" => Ok(LossFamily::CrossEntropy),
        "hinge" => Ok(LossFamily::Hinge),
        other => Err(PyValueError::new_err(format!("unknown loss family {other:?}"))),
    }
}

/// Rotates the last two axes by `k` quarter-turns counter-clockwise.
#[pyfunction]
fn rotate<'py>(py: Python<'py>, images: PyReadonlyArrayDyn<f32>, k: i64) -> PyResult<Bound<'py, PyArrayDyn<f32>>> {
    let out = rotation::rotate_image(&to_tensor_f32(&images), k).map_err(py_err)?;
    to_array_f32(py, &out)
}

/// Returns `(images, labels)` for the quarter-batch rotated four ways.
#[pyfunction]
fn rotation_batch<'py>(
    py: Python<'py>,
    images: PyReadonlyArrayDyn<f32>,
) -> PyResult<(Bound<'py, PyArrayDyn<f32>>, Bound<'py, PyArrayDyn<i64>>)> {
    let rb = rotation::make_rotation_batch(&to_tensor_f32(&images), Source::Real).map_err(py_err)?;
    Ok((to_array_f32(py, &rb.images)?, to_array_i64(py, &rb.labels)?))
}

/// Mean log-probability of the true rotation label.
#[pyfunction]
fn rotation_term(logits: PyReadonlyArrayDyn<f32>, labels: PyReadonlyArrayDyn<i64>) -> PyResult<f64> {
    let t = losses::rotation_term(&to_tensor_f32(&logits), &to_tensor_i64(&labels)).map_err(py_err)?;
    Ok(t.double_value(&[]))
}

#[pyfunction]
#[pyo3(signature = (real_logits, fake_logits, rot_logits=None, rot_labels=None, beta=1.0, loss="cross_entropy"))]
fn discriminator_loss(
    real_logits: PyReadonlyArrayDyn<f32>,
    fake_logits: PyReadonlyArrayDyn<f32>,
    rot_logits: Option<PyReadonlyArrayDyn<f32>>,
    rot_labels: Option<PyReadonlyArrayDyn<i64>>,
    beta: f64,
    loss: &str,
) -> PyResult<f64> {
    let rot = rot_logits.as_ref().zip(rot_labels.as_ref()).map(|(l, y)| (to_tensor_f32(l), to_tensor_i64(y)));
    let weights = LossWeights { alpha: 0.0, beta, gp_lambda: 0.0 };
    let out = losses::discriminator_loss(
        &to_tensor_f32(&real_logits),
        &to_tensor_f32(&fake_logits),
        rot.as_ref().map(|(logits, labels)| RotationLogits { logits, labels }),
        &weights,
        family(loss)?,
    )
    .map_err(py_err)?;
    Ok(out.double_value(&[]))
}

#[pyfunction]
#[pyo3(signature = (fake_logits, rot_logits=None, rot_labels=None, alpha=0.2, loss="cross_entropy"))]
fn generator_loss(
    fake_logits: PyReadonlyArrayDyn<f32>,
    rot_logits: Option<PyReadonlyArrayDyn<f32>>,
    rot_labels: Option<PyReadonlyArrayDyn<i64>>,
    alpha: f64,
    loss: &str,
) -> PyResult<f64> {
    let rot = rot_logits.as_ref().zip(rot_labels.as_ref()).map(|(l, y)| (to_tensor_f32(l), to_tensor_i64(y)));
    let weights = LossWeights { alpha, beta: 0.0, gp_lambda: 0.0 };
    let out = losses::generator_loss(
        &to_tensor_f32(&fake_logits),
        rot.as_ref().map(|(logits, labels)| RotationLogits { logits, labels }),
        &weights,
        family(loss)?,
    )
    .map_err(py_err)?;
    Ok(out.double_value(&[]))
}

fn stats_from(mu: &PyReadonlyArrayDyn<f64>, sigma: &PyReadonlyArrayDyn<f64>) -> PyResult<GaussianStats> {
    let d = mu.len();
    if sigma.shape() != [d, d] {
        return Err(PyValueError::new_err(format!("sigma must be {d}x{d}, got {:?}", sigma.shape())));
    }
    let mu = DVector::from_iterator(d, mu.as_array().iter().copied());
    let sigma = DMatrix::from_row_iterator(d, d, sigma.as_array().iter().copied());
    Ok(GaussianStats { mu, sigma })
}

/// Fréchet distance between two Gaussians given as `(mu, sigma)` pairs.
#[pyfunction]
fn frechet_distance(
    mu1: PyReadonlyArrayDyn<f64>,
    sigma1: PyReadonlyArrayDyn<f64>,
    mu2: PyReadonlyArrayDyn<f64>,
    sigma2: PyReadonlyArrayDyn<f64>,
) -> PyResult<f64> {
    metrics::frechet_distance(&stats_from(&mu1, &sigma1)?, &stats_from(&mu2, &sigma2)?).map_err(py_err)
}

/// Mean and unbiased covariance of an `[n, d]` feature matrix.
#[pyfunction]
fn gaussian_stats<'py>(
    py: Python<'py>,
    features: PyReadonlyArrayDyn<f64>,
) -> PyResult<(Bound<'py, PyArrayDyn<f64>>, Bound<'py, PyArrayDyn<f64>>)> {
    let shape: Vec<i64> = features.shape().iter().map(|&d| d as i64).collect();
    let data: Vec<f64> = features.as_array().iter().copied().collect();
    let s = metrics::gaussian_stats(&Tensor::from_slice(&data).reshape(&shape)).map_err(py_err)?;
    let d = s.dim();
    let mu = ArrayD::from_shape_vec(IxDyn(&[d]), s.mu.iter().copied().collect()).map_err(py_err)?;
    let sigma: Vec<f64> = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| s.sigma[(i, j)]).collect();
    let sigma = ArrayD::from_shape_vec(IxDyn(&[d, d]), sigma).map_err(py_err)?;
    Ok((mu.into_pyarray(py), sigma.into_pyarray(py)))
}

/// Procedural glyph images and labels.
#[pyfunction]
#[pyo3(signature = (n, size=32, seed=0, noise=0.1, clutter=0))]
fn synthetic_glyphs<'py>(
    py: Python<'py>,
    n: usize,
    size: usize,
    seed: u64,
    noise: f64,
    clutter: usize,
) -> PyResult<(Bound<'py, PyArrayDyn<f32>>, Bound<'py, PyArrayDyn<i64>>)> {
    let ds = SyntheticShapes { n, size, seed, noise, clutter, ..Default::default() }.generate().map_err(py_err)?;
    let labels = ds.labels.as_ref().ok_or_else(|| PyValueError::new_err("unlabeled dataset"))?;
    Ok((to_array_f32(py, &ds.images)?, to_array_i64(py, labels)?))
}

/// Training configuration. Built from TOML text; `set` takes dotted keys.
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: SsGANConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => SsGANConfig::from_toml_str(t).map_err(py_err)?,
            None => SsGANConfig::default(),
        };
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig { inner: SsGANConfig::load(&path).map_err(py_err)? })
    }

    /// Returns a copy with `key=value` applied; `value` is TOML syntax.
    fn set(&self, key: &str, value: &str) -> PyResult<Self> {
        let inner = self.inner.with_override(&format!("{key}={value}")).map_err(py_err)?;
        Ok(PyConfig { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py_object(py, &self.inner)
    }

    #[getter]
    fn hash(&self) -> String {
        self.inner.config_hash()
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Config(variant={}, seed={}, hash={})", self.inner.variant, self.inner.seed, self.inner.config_hash())
    }
}

/// Trains one run into `run_dir` and returns its record.
#[pyfunction]
#[pyo3(signature = (config, run_dir, resume=false, stop_after=None))]
fn train<'py>(
    py: Python<'py>,
    config: &PyConfig,
    run_dir: PathBuf,
    resume: bool,
    stop_after: Option<u64>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.inner.clone();
    let rec = py
        .detach(move || trainer::train(&cfg, &run_dir, &RunOptions { resume, stop_after }))
        .map_err(py_err)?;
    to_py_object(py, &rec)
}

/// Source logits of the final (or given) checkpoint of a run on `images`.
#[pyfunction]
#[pyo3(signature = (run_dir, images, step=None))]
fn discriminate<'py>(
    py: Python<'py>,
    run_dir: PathBuf,
    images: PyReadonlyArrayDyn<f32>,
    step: Option<u64>,
) -> PyResult<Bound<'py, PyArrayDyn<f32>>> {
    let state = TrainState::load_checkpoint(&checkpoint(&run_dir, step)?).map_err(py_err)?;
    let d = &state.discriminator;
    let logits = tch::no_grad(|| -> ssgan::Result<Tensor> { d.source_logits(&d.features(&to_tensor_f32(&images))?, None) })
        .map_err(py_err)?;
    to_array_f32(py, &logits)
}

fn checkpoint(run_dir: &Path, step: Option<u64>) -> PyResult<PathBuf> {
    let ckpts = list_checkpoints(run_dir).map_err(py_err)?;
    match step {
        Some(s) => ckpts.into_iter().find(|c| c.0 == s),
        None => ckpts.into_iter().last(),
    }
    .map(|c| c.1)
    .ok_or_else(|| PyValueError::new_err(format!("no matching checkpoint in {}", run_dir.display())))
}

/// Linear probes on every discriminator block, pooled over the given runs.
///
/// Probe data is the dataset named by the first run's config.
#[pyfunction]
#[pyo3(signature = (run_dirs, step=None, probe_toml=None))]
fn probe<'py>(
    py: Python<'py>,
    run_dirs: Vec<PathBuf>,
    step: Option<u64>,
    probe_toml: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: ProbeConfig = match probe_toml {
        Some(t) => toml::from_str(t).map_err(py_err)?,
        None => ProbeConfig::default(),
    };
    let first = run_dirs.first().ok_or_else(|| PyValueError::new_err("no run directories"))?;
    let step = match step {
        Some(s) => s,
        None => list_checkpoints(first).map_err(py_err)?.last().map(|c| c.0).ok_or_else(|| {
            PyValueError::new_err(format!("no checkpoints in {}", first.display()))
        })?,
    };
    let paths: Vec<PathBuf> = run_dirs.iter().map(|d| checkpoint(d, Some(step))).collect::<PyResult<_>>()?;
    let results = py
        .detach(move || -> ssgan::Result<_> {
            let state = TrainState::load_checkpoint(&paths[0])?;
            let train_data = state.config.dataset.load_train()?;
            let test = state.config.dataset.load_eval()?;
            let refs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
            probe_all_blocks(&refs, &train_data, &test, &cfg)
        })
        .map_err(py_err)?;
    to_py_object(py, &results)
}

/// One catastrophic-forgetting run; returns the accuracy trace.
#[pyfunction]
#[pyo3(signature = (variant, config_toml=None, seed=0))]
fn forgetting<'py>(py: Python<'py>, variant: &str, config_toml: Option<&str>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let v: ForgettingVariant = variant.parse().map_err(py_err)?;
    let cfg: ForgettingConfig = match config_toml {
        Some(t) => toml::from_str(t).map_err(py_err)?,
        None => ForgettingConfig::default(),
    };
    let trace = py
        .detach(move || -> ssgan::Result<_> {
            let train_data = cfg.dataset.load_train()?;
            let eval = cfg.dataset.load_eval()?;
            run_forgetting_experiment(v, &cfg, &train_data, &eval, seed)
        })
        .map_err(py_err)?;
    to_py_object(py, &trace)
}

#[pymodule]
fn ssgan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(rotate, m)?)?;
    m.add_function(wrap_pyfunction!(rotation_batch, m)?)?;
    m.add_function(wrap_pyfunction!(rotation_term, m)?)?;
    m.add_function(wrap_pyfunction!(discriminator_loss, m)?)?;
    m.add_function(wrap_pyfunction!(generator_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_stats, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_glyphs, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(discriminate, m)?)?;
    m.add_function(wrap_pyfunction!(probe, m)?)?;
    m.add_function(wrap_pyfunction!(forgetting, m)?)?;
    Ok(())
}
