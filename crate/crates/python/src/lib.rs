//! Python bindings for the `noise2sim` crate.
//!
//! Tensors cross the boundary as flat lists plus a shape; no array library is
//! required on the Python side.

use noise2sim::nn::{
    load_model, save_model, Architecture, Checkpoint, DenoiserModel, Normalization,
};
use noise2sim::search::{construct_similar_pair, knn_similar_pixels, NearestImages, PairingMethod};
use noise2sim::tensor::{load_tensor, save_pgm, save_tensor};
use noise2sim::training::{self, DatasetHandle, ModelKind, TrainConfig, TrainMode};
use noise2sim::volume::{self, DissimilarMask, LossKind};
use noise2sim::{metrics, nn, noise, Domain, Error};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_domain(name: &str) -> PyResult<Domain> {
    match name {
        "unit" => Ok(Domain::UnitInterval),
        "hu" => Ok(Domain::Hounsfield),
        "raw" => Ok(Domain::Raw),
        other => Err(PyValueError::new_err(format!(
            "unknown domain `{other}` (expected unit, hu or raw)"
        ))),
    }
}

fn domain_name(d: Domain) -> &'static str {
    match d {
        Domain::UnitInterval => "unit",
        Domain::Hounsfield => "hu",
        Domain::Raw => "raw",
    }
}

fn parse_loss(name: &str) -> PyResult<LossKind> {
    match name {
        "mse" => Ok(LossKind::Mse),
        "l1" => Ok(LossKind::L1),
        other => Err(PyValueError::new_err(format!(
            "unknown loss `{other}` (expected mse or l1)"
        ))),
    }
}

/// Dense float32 tensor in row-major, channel-last order.
#[pyclass(name = "Tensor", module = "noise2sim", frozen, from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: noise2sim::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (data, shape, domain = "unit"))]
    fn new(data: Vec<f32>, shape: Vec<usize>, domain: &str) -> PyResult<Self> {
        let inner = noise2sim::Tensor::new(shape, data, parse_domain(domain)?).map_err(to_py)?;
        Ok(PyTensor { inner })
    }

    /// `height x width` image, or `height x width x channels` when `channels > 1`.
    #[staticmethod]
    #[pyo3(signature = (data, height, width, channels = 1, domain = "unit"))]
    fn image(
        data: Vec<f32>,
        height: usize,
        width: usize,
        channels: usize,
        domain: &str,
    ) -> PyResult<Self> {
        let inner = noise2sim::Tensor::image(height, width, channels, data, parse_domain(domain)?)
            .map_err(to_py)?;
        Ok(PyTensor { inner })
    }

    /// Reads an `N2ST` file or a binary PGM.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyTensor {
            inner: load_tensor(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_tensor(&self.inner, path).map_err(to_py)
    }

    fn save_pgm(&self, path: &str) -> PyResult<()> {
        save_pgm(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.dims().to_vec()
    }

    #[getter]
    fn domain(&self) -> &'static str {
        domain_name(self.inner.domain())
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    /// Slice `index` of a volume.
    fn slice(&self, index: usize) -> PyResult<Self> {
        Ok(PyTensor {
            inner: self.inner.slice(index).map_err(to_py)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Tensor(shape={:?}, domain={})",
            self.inner.dims(),
            domain_name(self.inner.domain())
        )
    }
}

fn wrap(t: noise2sim::Tensor) -> PyTensor {
    PyTensor { inner: t }
}

/// Per-pixel nearest similar pixels of one image.
#[pyclass(name = "Neighbors", module = "noise2sim", frozen, from_py_object)]
#[derive(Clone)]
struct PyNeighbors {
    inner: NearestImages,
}

#[pymethods]
impl PyNeighbors {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyNeighbors {
            inner: NearestImages::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn patch_size(&self) -> usize {
        self.inner.patch_size()
    }

    /// `(row, col)` of the neighbours of pixel `(row, col)`, nearest first.
    fn neighbors(&self, row: usize, col: usize) -> PyResult<Vec<(u32, u32)>> {
        self.check(row, col)?;
        Ok(self.inner.neighbors(row, col).to_vec())
    }

    fn distances(&self, row: usize, col: usize) -> PyResult<Vec<f32>> {
        self.check(row, col)?;
        Ok(self.inner.distances(row, col).to_vec())
    }
}

impl PyNeighbors {
    fn check(&self, row: usize, col: usize) -> PyResult<()> {
        let (h, w, _) = self.inner.shape();
        if row >= h || col >= w {
            return Err(to_py(Error::OutOfBounds(row, col)));
        }
        Ok(())
    }
}

/// Residual denoising network.
#[pyclass(name = "Model", module = "noise2sim", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: DenoiserModel,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized UNet; it starts as the identity map.
    #[staticmethod]
    #[pyo3(signature = (in_channels = 1, width1 = 32, width2 = 64, domain = "unit", seed = 0))]
    fn unet(
        in_channels: usize,
        width1: usize,
        width2: usize,
        domain: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let arch = Architecture::UNet {
            in_channels,
            width1,
            width2,
        };
        let norm = Normalization::for_domain(parse_domain(domain)?);
        Ok(PyModel {
            inner: DenoiserModel::new(arch, norm, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: load_model(path).map_err(to_py)?.model,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let ckpt = Checkpoint {
            model: self.inner.clone(),
            optim: None,
        };
        save_model(&ckpt, path).map_err(to_py)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// One untiled forward pass over a single image.
    fn forward(&self, x: &PyTensor) -> PyResult<PyTensor> {
        Ok(wrap(self.inner.forward(&x.inner).map_err(to_py)?))
    }

    /// Tiled inference on an image or, slice by slice, a volume.
    fn denoise(&self, x: &PyTensor) -> PyResult<PyTensor> {
        Ok(wrap(
            training::denoise(&self.inner, &x.inner).map_err(to_py)?,
        ))
    }
}

#[pyfunction]
fn add_gaussian(clean: &PyTensor, std: f32, seed: u64) -> PyResult<PyTensor> {
    Ok(wrap(
        noise::add_gaussian(&clean.inner, std, seed).map_err(to_py)?,
    ))
}

#[pyfunction]
fn add_poisson(clean: &PyTensor, lam: f32, seed: u64) -> PyResult<PyTensor> {
    Ok(wrap(
        noise::add_poisson(&clean.inner, lam, seed).map_err(to_py)?,
    ))
}

#[pyfunction]
#[pyo3(name = "knn_similar_pixels", signature = (image, k = 8, s = 3))]
fn knn_similar_pixels_py(image: &PyTensor, k: usize, s: usize) -> PyResult<PyNeighbors> {
    Ok(PyNeighbors {
        inner: knn_similar_pixels(&image.inner, k, s).map_err(to_py)?,
    })
}

/// `(input, target)` drawn from the similar set; `method` is one of
/// `original-random`, `random-original`, `random-random` or `sorted:J1,J2`.
#[pyfunction]
#[pyo3(signature = (neighbors, image, method = "random-random", seed = 0))]
fn similar_pair(
    neighbors: &PyNeighbors,
    image: &PyTensor,
    method: &str,
    seed: u64,
) -> PyResult<(PyTensor, PyTensor)> {
    let method: PairingMethod = method.parse().map_err(to_py)?;
    let (a, b) =
        construct_similar_pair(&neighbors.inner, &image.inner, method, seed).map_err(to_py)?;
    Ok((wrap(a), wrap(b)))
}

#[pyfunction]
#[pyo3(signature = (slice_i, slice_j, s = 7))]
fn distance_map(slice_i: &PyTensor, slice_j: &PyTensor, s: usize) -> PyResult<PyTensor> {
    Ok(wrap(
        volume::distance_map(&slice_i.inner, &slice_j.inner, s).map_err(to_py)?,
    ))
}

/// 1.0 where `d > threshold` (excluded from the loss), 0.0 elsewhere.
#[pyfunction]
fn dissimilar_mask(d: &PyTensor, threshold: f32) -> PyResult<PyTensor> {
    let mask = volume::dissimilar_mask(&d.inner, threshold).map_err(to_py)?;
    Ok(wrap(mask.to_tensor()))
}

/// Mean loss over the pixels whose mask value is zero.
#[pyfunction]
#[pyo3(signature = (pred, target, mask = None, loss = "mse"))]
fn masked_loss(
    pred: &PyTensor,
    target: &PyTensor,
    mask: Option<&PyTensor>,
    loss: &str,
) -> PyResult<f32> {
    let (h, w, _) = pred.inner.image_shape().map_err(to_py)?;
    let mask = match mask {
        Some(m) => DissimilarMask::from_tensor(&m.inner, 0.0).map_err(to_py)?,
        None => DissimilarMask::none(h, w),
    };
    volume::masked_loss(&pred.inner, &target.inner, &mask, parse_loss(loss)?).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (reference, test, peak = None))]
fn psnr(reference: &PyTensor, test: &PyTensor, peak: Option<f64>) -> PyResult<f64> {
    let peak = peak.unwrap_or_else(|| metrics::default_peak(reference.inner.domain()));
    metrics::psnr(&reference.inner, &test.inner, peak).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (reference, test, peak = None))]
fn ssim(reference: &PyTensor, test: &PyTensor, peak: Option<f64>) -> PyResult<f64> {
    let peak = peak.unwrap_or_else(|| metrics::default_peak(reference.inner.domain()));
    metrics::ssim(&reference.inner, &test.inner, peak).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (image, h, patch_radius = 3, search_radius = 10))]
fn nlm_denoise(
    image: &PyTensor,
    h: f32,
    patch_radius: usize,
    search_radius: usize,
) -> PyResult<PyTensor> {
    let params = metrics::NlmParams {
        h,
        patch_radius,
        search_radius,
    };
    Ok(wrap(
        metrics::nlm_denoise(&image.inner, &params).map_err(to_py)?,
    ))
}

#[pyfunction]
fn cosine_lr(step: u64, total: u64, lr0: f32) -> f32 {
    nn::cosine_lr(step, total, lr0)
}

/// Trains a model and returns it with the per-step log as
/// `(step, lr, loss, skipped)` tuples.
#[pyfunction]
#[pyo3(signature = (
    noisy, mode, seed, *, clean = None, paired = None, neighbors = None, steps = 1000, k = None, s = None,
    dth = None, batch = 4, crop = None, lr = None, loss = "mse", pairing = "random-random", augment = true,
    width1 = 32, width2 = 64, linear = false
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    noisy: Vec<PyTensor>,
    mode: &str,
    seed: u64,
    clean: Option<Vec<PyTensor>>,
    paired: Option<Vec<PyTensor>>,
    neighbors: Option<Vec<PyNeighbors>>,
    steps: u64,
    k: Option<usize>,
    s: Option<usize>,
    dth: Option<f32>,
    batch: usize,
    crop: Option<usize>,
    lr: Option<f32>,
    loss: &str,
    pairing: &str,
    augment: bool,
    width1: usize,
    width2: usize,
    linear: bool,
) -> PyResult<(PyModel, Vec<(u64, f32, f64, usize)>)> {
    let mode: TrainMode = mode.parse().map_err(to_py)?;
    let mut cfg = TrainConfig::new(mode, seed);
    cfg.steps = steps;
    cfg.k = k.unwrap_or(cfg.k);
    cfg.s = s.unwrap_or(cfg.s);
    if dth.is_some() {
        cfg.d_th = dth;
    }
    cfg.batch = batch;
    cfg.crop = crop;
    cfg.lr0 = lr.unwrap_or(cfg.lr0);
    cfg.loss = parse_loss(loss)?;
    cfg.pairing = pairing.parse().map_err(to_py)?;
    cfg.augment = augment;
    cfg.model = if linear {
        ModelKind::Linear
    } else {
        ModelKind::UNet { width1, width2 }
    };
    let unwrap_all = |v: Vec<PyTensor>| v.into_iter().map(|t| t.inner).collect::<Vec<_>>();
    let mut data = DatasetHandle::new(unwrap_all(noisy));
    if let Some(c) = clean {
        data = data.with_clean(unwrap_all(c));
    }
    if let Some(p) = paired {
        data = data.with_paired(unwrap_all(p));
    }
    if let Some(n) = neighbors {
        data = data.with_neighbors(n.into_iter().map(|t| t.inner).collect());
    }
    let trained = py.detach(|| training::train(&cfg, &data)).map_err(to_py)?;
    let log = trained
        .log
        .iter()
        .map(|r| (r.step, r.lr, r.loss, r.skipped))
        .collect();
    Ok((
        PyModel {
            inner: trained.model,
        },
        log,
    ))
}

/// Per-pixel mean of `m` random similar-pair differences for each image,
/// with the overall minimum and maximum.
#[pyfunction]
#[pyo3(signature = (noisy, neighbors, m = 100_000, seed = 0))]
fn estimate_zcd(
    py: Python<'_>,
    noisy: Vec<PyTensor>,
    neighbors: Vec<PyNeighbors>,
    m: usize,
    seed: u64,
) -> PyResult<(Vec<PyTensor>, f32, f32)> {
    let data = DatasetHandle::new(noisy.into_iter().map(|t| t.inner).collect())
        .with_neighbors(neighbors.into_iter().map(|n| n.inner).collect());
    let est = py
        .detach(|| training::estimate_zcd(&data, m, seed))
        .map_err(to_py)?;
    Ok((est.means.into_iter().map(wrap).collect(), est.min, est.max))
}

#[pymodule(name = "noise2sim")]
fn noise2sim_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyNeighbors>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(add_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(add_poisson, m)?)?;
    m.add_function(wrap_pyfunction!(knn_similar_pixels_py, m)?)?;
    m.add_function(wrap_pyfunction!(similar_pair, m)?)?;
    m.add_function(wrap_pyfunction!(distance_map, m)?)?;
    m.add_function(wrap_pyfunction!(dissimilar_mask, m)?)?;
    m.add_function(wrap_pyfunction!(masked_loss, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(nlm_denoise, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_zcd, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
