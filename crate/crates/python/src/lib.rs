//! Python bindings: volumes, radiographs, metrics, tensors with autodiff,
//! training and inference.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use biplanar_ct::dataset::load_dataset;
use biplanar_ct::drr::{self, synthesize_biplanar};
use biplanar_ct::infer::{as_ct_container, Reconstructor as CoreReconstructor};
use biplanar_ct::tensor::{self as ts, Tensor as CoreTensor};
use biplanar_ct::train::{fit as core_fit, TrainConfig as CoreConfig};
use biplanar_ct::volume::{self as vol, CtVolume, NormalizedVolume as CoreNormalized, PhantomSpec, Preprocess};
use biplanar_ct::{checks, metrics};

create_exception!(biplanar_ct, BiplanarError, PyException, "Raised for every library error; the message starts with a stable code.");

fn err(e: biplanar_ct::Error) -> PyErr {
    BiplanarError::new_err(format!("{}: {e}", e.code()))
}

/// Raw CT volume in Hounsfield units, axes `(z, y, x)`.
#[pyclass(module = "biplanar_ct")]
#[derive(Clone)]
pub struct Volume {
    pub inner: CtVolume,
}

#[pymethods]
impl Volume {
    #[new]
    fn new(dims: [usize; 3], spacing: [f32; 3], values: Vec<f32>) -> PyResult<Self> {
        Ok(Volume { inner: CtVolume::new(dims, spacing, values).map_err(err)? })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Volume { inner: vol::read_volume(&path).map_err(err)? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        vol::write_volume(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims
    }

    #[getter]
    fn spacing(&self) -> [f32; 3] {
        self.inner.spacing
    }

    #[getter]
    fn values(&self) -> Vec<f32> {
        self.inner.values.clone()
    }

    fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.inner.get(z, y, x)
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?}, spacing={:?})", self.inner.dims, self.inner.spacing)
    }
}

/// Volume mapped into `[0, 1]`.
#[pyclass(module = "biplanar_ct")]
#[derive(Clone)]
pub struct NormalizedVolume {
    pub inner: CoreNormalized,
}

#[pymethods]
impl NormalizedVolume {
    #[new]
    fn new(dims: [usize; 3], spacing: [f32; 3], values: Vec<f32>) -> PyResult<Self> {
        Ok(NormalizedVolume { inner: CoreNormalized::new(dims, spacing, values).map_err(err)? })
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims
    }

    #[getter]
    fn values(&self) -> Vec<f32> {
        self.inner.values.clone()
    }

    fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.inner.get(z, y, x)
    }

    /// Writes the values unchanged into a `.ctv` file.
    fn write(&self, path: PathBuf) -> PyResult<()> {
        vol::write_volume(&as_ct_container(&self.inner).map_err(err)?, &path).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("NormalizedVolume(dims={:?})", self.inner.dims)
    }
}

/// Frontal `(z, x)` and lateral `(z, y)` radiographs.
#[pyclass(module = "biplanar_ct")]
#[derive(Clone)]
pub struct XrayPair {
    pub inner: drr::XrayPair,
}

#[pymethods]
impl XrayPair {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(XrayPair { inner: drr::read_pair(&path).map_err(err)? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        drr::write_pair(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims
    }

    /// Row-major `(z, x)` pixels.
    #[getter]
    fn frontal(&self) -> Vec<f32> {
        self.inner.frontal.data.clone()
    }

    /// Row-major `(z, y)` pixels.
    #[getter]
    fn lateral(&self) -> Vec<f32> {
        self.inner.lateral.data.clone()
    }
}

#[pyfunction]
#[pyo3(signature = (size = 32, seed = 0, spacing_mm = 2.0))]
fn generate_phantom(size: usize, seed: u64, spacing_mm: f32) -> PyResult<Volume> {
    let spec = PhantomSpec { size, seed, spacing_mm, ..Default::default() };
    Ok(Volume { inner: vol::generate_phantom(&spec).map_err(err)? })
}

/// Resample, crop, clip to `[-1000, 4096]` HU and normalize.
#[pyfunction]
#[pyo3(signature = (volume, size = 32, spacing_mm = 2.0, normalization = "fixed_span"))]
fn preprocess(volume: &Volume, size: usize, spacing_mm: f32, normalization: &str) -> PyResult<NormalizedVolume> {
    let pre = Preprocess {
        size,
        spacing_mm,
        normalization: normalization.parse().map_err(err)?,
        ..Default::default()
    };
    Ok(NormalizedVolume { inner: pre.apply(&volume.inner).map_err(err)? })
}

#[pyfunction]
fn synthesize(volume: &NormalizedVolume) -> XrayPair {
    XrayPair { inner: synthesize_biplanar(&volume.inner) }
}

#[pyfunction]
fn mae(a: &NormalizedVolume, b: &NormalizedVolume) -> PyResult<f64> {
    metrics::mae(&a.inner, &b.inner).map_err(err)
}

#[pyfunction]
fn mse(a: &NormalizedVolume, b: &NormalizedVolume) -> PyResult<f64> {
    metrics::mse(&a.inner, &b.inner).map_err(err)
}

#[pyfunction]
fn cosine_similarity(a: &NormalizedVolume, b: &NormalizedVolume) -> PyResult<f64> {
    metrics::cosine_similarity(&a.inner, &b.inner).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, peak = 1.0))]
fn psnr(a: &NormalizedVolume, b: &NormalizedVolume, peak: f64) -> PyResult<f64> {
    metrics::psnr(&a.inner, &b.inner, peak).map_err(err)
}

#[pyfunction]
fn ssim3d(a: &NormalizedVolume, b: &NormalizedVolume) -> PyResult<f64> {
    metrics::ssim3d(&a.inner, &b.inner).map_err(err)
}

/// f32 tensor with reverse-mode differentiation.
#[pyclass(module = "biplanar_ct", unsendable)]
#[derive(Clone)]
pub struct Tensor {
    pub inner: CoreTensor,
}

impl From<CoreTensor> for Tensor {
    fn from(inner: CoreTensor) -> Self {
        Tensor { inner }
    }
}

#[pymethods]
impl Tensor {
    #[new]
    #[pyo3(signature = (shape, data, requires_grad = false))]
    fn new(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> PyResult<Self> {
        Ok(CoreTensor::new(&shape, data).map_err(err)?.requires_grad_(requires_grad).into())
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn requires_grad(&self) -> bool {
        self.inner.requires_grad()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f32> {
        self.inner.to_vec()
    }

    fn item(&self) -> PyResult<f32> {
        if self.inner.numel() != 1 {
            return Err(BiplanarError::new_err(format!("item() needs one element, shape is {:?}", self.inner.shape())));
        }
        Ok(self.inner.item())
    }

    #[getter]
    fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad()
    }

    fn zero_grad(&self) {
        self.inner.zero_grad()
    }

    fn detach(&self) -> Tensor {
        self.inner.detach().into()
    }

    fn backward(&self) -> PyResult<()> {
        self.inner.backward().map_err(err)
    }

    fn __add__(&self, other: &Tensor) -> PyResult<Tensor> {
        Ok(ts::add(&self.inner, &other.inner).map_err(err)?.into())
    }

    fn __sub__(&self, other: &Tensor) -> PyResult<Tensor> {
        Ok(ts::sub(&self.inner, &other.inner).map_err(err)?.into())
    }

    fn __mul__(&self, other: &Tensor) -> PyResult<Tensor> {
        Ok(ts::mul(&self.inner, &other.inner).map_err(err)?.into())
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?}, requires_grad={})", self.inner.shape(), self.inner.requires_grad())
    }
}

#[pyfunction]
fn relu(x: &Tensor) -> Tensor {
    ts::relu(&x.inner).into()
}

#[pyfunction]
#[pyo3(signature = (x, slope = 0.2))]
fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    ts::leaky_relu(&x.inner, slope).into()
}

#[pyfunction]
fn sigmoid(x: &Tensor) -> Tensor {
    ts::sigmoid(&x.inner).into()
}

#[pyfunction]
fn square(x: &Tensor) -> Tensor {
    ts::square(&x.inner).into()
}

#[pyfunction]
fn mean_all(x: &Tensor) -> Tensor {
    ts::mean_all(&x.inner).into()
}

#[pyfunction]
fn reduce_mean(x: &Tensor, axes: Vec<usize>) -> PyResult<Tensor> {
    Ok(ts::reduce_mean(&x.inner, &axes).map_err(err)?.into())
}

#[pyfunction]
fn softmax_channel(x: &Tensor) -> PyResult<Tensor> {
    Ok(ts::softmax_channel(&x.inner).map_err(err)?.into())
}

#[pyfunction]
fn concat_channels(xs: Vec<Tensor>) -> PyResult<Tensor> {
    let inner: Vec<CoreTensor> = xs.into_iter().map(|t| t.inner).collect();
    Ok(ts::concat_channels(&inner).map_err(err)?.into())
}

#[pyfunction]
#[pyo3(signature = (x, w, bias = None, stride = 1, padding = 0))]
fn conv3d(x: &Tensor, w: &Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> PyResult<Tensor> {
    Ok(ts::conv3d(&x.inner, &w.inner, bias.as_ref().map(|b| &b.inner), stride, padding).map_err(err)?.into())
}

#[pyfunction]
#[pyo3(signature = (x, w, bias = None, stride = 1, padding = 0))]
fn conv2d(x: &Tensor, w: &Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> PyResult<Tensor> {
    Ok(ts::conv2d(&x.inner, &w.inner, bias.as_ref().map(|b| &b.inner), stride, padding).map_err(err)?.into())
}

#[pyfunction]
#[pyo3(signature = (x, w, bias = None, stride = 1, padding = 0))]
fn conv_transpose3d(x: &Tensor, w: &Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> PyResult<Tensor> {
    Ok(ts::conv_transpose3d(&x.inner, &w.inner, bias.as_ref().map(|b| &b.inner), stride, padding).map_err(err)?.into())
}

/// Flat `key = value` training configuration.
#[pyclass(module = "biplanar_ct")]
#[derive(Clone)]
pub struct TrainConfig {
    pub inner: CoreConfig,
}

#[pymethods]
impl TrainConfig {
    /// Defaults, overridden by `text` when given.
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(TrainConfig { inner: CoreConfig::parse(text).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(TrainConfig { inner: CoreConfig::load(&path).map_err(err)? })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn volume_size(&self) -> usize {
        self.inner.volume_size
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[getter]
    fn batch_size(&self) -> usize {
        self.inner.batch_size
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out_dir.clone()
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig({:?})", self.inner.to_text())
    }
}

/// Trains from `config.data_dir`; returns the loss log rows and artifact paths.
#[pyfunction]
#[pyo3(signature = (config, resume = None))]
fn fit<'py>(py: Python<'py>, config: &TrainConfig, resume: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
    let out = core_fit(&config.inner, resume.as_deref()).map_err(err)?;
    let rows: Vec<(u64, f64, f64, f64, f64)> = out.losses.iter().map(|r| (r.step, r.adv, r.vox, r.proj, r.disc)).collect();
    let d = PyDict::new_bound(py);
    d.set_item("losses", rows)?;
    d.set_item("loss_log", out.loss_log)?;
    d.set_item("last_checkpoint", out.last_checkpoint)?;
    d.set_item("epochs", out.trainer.epoch())?;
    Ok(d)
}

/// Generator loaded from a checkpoint.
#[pyclass(module = "biplanar_ct", unsendable)]
pub struct Reconstructor {
    inner: CoreReconstructor,
}

#[pymethods]
impl Reconstructor {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Reconstructor { inner: CoreReconstructor::load(&path).map_err(err)? })
    }

    fn reconstruct(&self, pair: &XrayPair) -> PyResult<NormalizedVolume> {
        Ok(NormalizedVolume { inner: self.inner.reconstruct(&pair.inner).map_err(err)? })
    }

    /// Mean metrics over a directory of paired samples; writes the CSV
    /// report when `report` is given.
    #[pyo3(signature = (data_dir, report = None))]
    fn evaluate<'py>(&self, py: Python<'py>, data_dir: PathBuf, report: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
        let data = load_dataset(&data_dir, &self.inner.config.preprocess()).map_err(err)?;
        let rep = self.inner.evaluate(&data).map_err(err)?;
        if let Some(p) = report {
            rep.write_csv(&p).map_err(err)?;
        }
        let d = PyDict::new_bound(py);
        d.set_item("samples", rep.samples.len())?;
        if let Some(m) = rep.mean() {
            for (k, v) in ["mae", "mse", "cosine", "psnr_db", "ssim"].iter().zip(m) {
                d.set_item(*k, v)?;
            }
        }
        Ok(d)
    }
}

#[pyfunction]
fn registered_ops() -> Vec<&'static str> {
    checks::REGISTERED.to_vec()
}

/// `(name, max_rel_err, passed)` for one target or every registered one.
#[pyfunction]
#[pyo3(signature = (op = None))]
fn gradcheck(op: Option<String>) -> PyResult<Vec<(String, f64, bool)>> {
    let names: Vec<String> = match op {
        Some(n) => vec![n],
        None => checks::REGISTERED.iter().map(|s| s.to_string()).collect(),
    };
    names
        .into_iter()
        .map(|n| {
            let r = checks::run(&n).map_err(err)?;
            Ok((n, r.max_rel_err, r.passed))
        })
        .collect()
}

#[pymodule]
#[pyo3(name = "biplanar_ct")]
pub fn init_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("BiplanarError", m.py().get_type_bound::<BiplanarError>())?;
    m.add_class::<Volume>()?;
    m.add_class::<NormalizedVolume>()?;
    m.add_class::<XrayPair>()?;
    m.add_class::<Tensor>()?;
    m.add_class::<TrainConfig>()?;
    m.add_class::<Reconstructor>()?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(preprocess, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim3d, m)?)?;
    m.add_function(wrap_pyfunction!(relu, m)?)?;
    m.add_function(wrap_pyfunction!(leaky_relu, m)?)?;
    m.add_function(wrap_pyfunction!(sigmoid, m)?)?;
    m.add_function(wrap_pyfunction!(square, m)?)?;
    m.add_function(wrap_pyfunction!(mean_all, m)?)?;
    m.add_function(wrap_pyfunction!(reduce_mean, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_channel, m)?)?;
    m.add_function(wrap_pyfunction!(concat_channels, m)?)?;
    m.add_function(wrap_pyfunction!(conv3d, m)?)?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(conv_transpose3d, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(registered_ops, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
