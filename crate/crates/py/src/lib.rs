use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use msunet::archive::{read_archive, write_archive, CanonicalArchive};
use msunet::dataio::{self, MaskVolume, PhantomConfig, VideoVolume};
use msunet::ica::IcaConfig;
use msunet::sampler::{self, ScaleSpec};
use msunet::statnet::{self, GraphConfig, MixPoint, NetworkGraph};

fn py_err(e: msunet::Error) -> PyErr {
    let msg = format!("{}: {e}", e.category());
    match e {
        msunet::Error::Io(_) => PyIOError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

/// Video volume `[X, Y, Z, T]`, voxels T-major then Z, Y, X.
#[pyclass(name = "Volume", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyVolume(VideoVolume);

#[pymethods]
impl PyVolume {
    #[new]
    fn new(dims: [usize; 4], voxels: Vec<f64>) -> PyResult<Self> {
        VideoVolume::new(dims, voxels).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        dataio::read_volume(path).map(Self).map_err(py_err)
    }

    fn write(&self, path: &str) -> PyResult<()> {
        dataio::write_volume(path, &self.0).map_err(py_err)
    }

    #[getter]
    fn dims(&self) -> [usize; 4] {
        self.0.dims()
    }

    fn voxels(&self) -> Vec<f64> {
        self.0.voxels().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?})", self.0.dims())
    }
}

/// Label volume with classes 0 background, 1 RV, 2 MYO, 3 LV.
#[pyclass(name = "Mask", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMask(MaskVolume);

#[pymethods]
impl PyMask {
    #[new]
    fn new(dims: [usize; 4], labels: Vec<u8>) -> PyResult<Self> {
        MaskVolume::new(dims, labels).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        dataio::read_mask(path).map(Self).map_err(py_err)
    }

    fn write(&self, path: &str) -> PyResult<()> {
        dataio::write_mask(path, &self.0).map_err(py_err)
    }

    #[getter]
    fn dims(&self) -> [usize; 4] {
        self.0.dims()
    }

    fn labels(&self) -> Vec<u8> {
        self.0.labels().to_vec()
    }

    /// Voxel count per class.
    fn histogram(&self) -> [usize; 4] {
        self.0.histogram()
    }

    /// Dice of RV, MYO and LV against `truth`.
    fn dice(&self, truth: &PyMask) -> PyResult<[f64; 3]> {
        if truth.0.dims() != self.0.dims() {
            return Err(PyValueError::new_err("masks differ in shape"));
        }
        Ok(msunet::trainer::class_dice(self.0.labels(), truth.0.labels()))
    }
}

#[pyclass(name = "ScaleSpec", frozen, from_py_object)]
#[derive(Clone)]
struct PyScaleSpec(ScaleSpec);

#[pymethods]
impl PyScaleSpec {
    #[new]
    fn new(patch: usize, span: usize, dim: usize) -> PyResult<Self> {
        ScaleSpec::new(patch, span, dim).map(Self).map_err(py_err)
    }

    /// Basis dimension `round(ratio * patch^2 * span)`, at least 1.
    #[staticmethod]
    fn from_ratio(patch: usize, span: usize, ratio: f64) -> PyResult<Self> {
        ScaleSpec::from_ratio(patch, span, ratio).map(Self).map_err(py_err)
    }

    #[getter]
    fn patch(&self) -> usize {
        self.0.patch
    }

    #[getter]
    fn span(&self) -> usize {
        self.0.span
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim
    }

    fn ratio(&self) -> f64 {
        self.0.ratio()
    }

    fn __repr__(&self) -> String {
        self.0.label()
    }
}

/// A video collapsed at every scale.
#[pyclass(name = "Archive", frozen)]
struct PyArchive(CanonicalArchive);

#[pymethods]
impl PyArchive {
    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        read_archive(path).map(Self).map_err(py_err)
    }

    fn write(&self, path: &str) -> PyResult<()> {
        write_archive(path, &self.0).map_err(py_err)
    }

    #[getter]
    fn snippets(&self) -> usize {
        self.0.plan.snippets
    }

    fn stored_floats(&self) -> usize {
        self.0.stored_floats()
    }

    fn scales(&self) -> Vec<PyScaleSpec> {
        self.0.plan.scales.iter().cloned().map(PyScaleSpec).collect()
    }

    /// Video rebuilt from one scale, in original intensity units.
    #[pyo3(signature = (scale=0, noise_seed=None))]
    fn restore(&self, scale: usize, noise_seed: Option<u64>) -> PyResult<PyVolume> {
        if scale >= self.0.plan.scales.len() {
            return Err(PyValueError::new_err(format!("archive has no scale {scale}")));
        }
        sampler::restore(&self.0.scale_grids(scale), &self.0.plan, scale, &self.0.norm, noise_seed).map(PyVolume).map_err(py_err)
    }
}

/// Normalizes `video` and fits one basis per snippet and scale.
#[pyfunction]
#[pyo3(signature = (video, scales, seed=0))]
fn collapse(video: &PyVolume, scales: Vec<PyScaleSpec>, seed: u64) -> PyResult<PyArchive> {
    let (norm_video, norm) = sampler::normalize(&video.0);
    let specs: Vec<ScaleSpec> = scales.into_iter().map(|s| s.0).collect();
    let ex = sampler::extract_multiscale(&norm_video, &specs, &IcaConfig { seed, ..IcaConfig::default() }).map_err(py_err)?;
    Ok(PyArchive(CanonicalArchive { plan: ex.plan, norm, grids: ex.grids }))
}

#[pyfunction]
fn normalized_rmse(restored: &PyVolume, reference: &PyVolume) -> PyResult<f64> {
    sampler::normalized_rmse(&restored.0, &reference.0).map_err(py_err)
}

/// Phantom cine cases as `(Volume, Mask)` pairs.
#[pyfunction]
#[pyo3(signature = (dims=[64, 64, 8, 30], num_cases=30, seed=7, noise=0.05, taper=0.93))]
fn generate_phantom(dims: [usize; 4], num_cases: usize, seed: u64, noise: f64, taper: f64) -> PyResult<Vec<(PyVolume, PyMask)>> {
    let cfg = PhantomConfig { dims, num_cases, seed, noise_sigma: noise, apex_taper: taper, ..PhantomConfig::default() };
    let cases = dataio::generate_phantom(&cfg).map_err(py_err)?;
    Ok(cases.into_iter().map(|(v, m)| (PyVolume(v), PyMask(m))).collect())
}

#[pyclass(name = "Network", frozen)]
struct PyNetwork(NetworkGraph);

#[pymethods]
impl PyNetwork {
    /// Frame-wise U-Net baseline.
    #[staticmethod]
    #[pyo3(signature = (depth=3, base_channels=8, classes=4, seed=0))]
    fn unet(depth: usize, base_channels: usize, classes: usize, seed: u64) -> PyResult<Self> {
        let mut cfg = GraphConfig::unet(depth, base_channels, classes);
        cfg.seed = seed;
        NetworkGraph::build(cfg).map(Self).map_err(py_err)
    }

    /// Multiscale statistical network; `mix_point` is "after_dt" or "after_ut".
    #[staticmethod]
    #[pyo3(signature = (scales, base_channels=8, depth=2, classes=4, mix_point="after_dt", seed=0))]
    fn msunet(scales: Vec<PyScaleSpec>, base_channels: usize, depth: usize, classes: usize, mix_point: &str, seed: u64) -> PyResult<Self> {
        let mix = MixPoint::parse(mix_point).map_err(py_err)?;
        let mut cfg = GraphConfig::msunet(scales.into_iter().map(|s| s.0).collect(), base_channels, depth, classes, mix);
        cfg.seed = seed;
        NetworkGraph::build(cfg).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        statnet::load_checkpoint(std::path::Path::new(path)).map(Self).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        statnet::save_checkpoint(&self.0, std::path::Path::new(path)).map_err(py_err)
    }

    #[getter]
    fn statistical(&self) -> bool {
        self.0.config.statistical
    }

    fn param_count(&self) -> usize {
        self.0.param_count()
    }

    /// Per-layer parameter layout as CSV.
    fn layout(&self) -> String {
        self.0.layout_table()
    }

    /// Frame-wise over statistical layer MACs on a `[X, Y, Z, T]` video.
    fn flop_ratio(&self, dims: [usize; 4]) -> f64 {
        statnet::flop_count(&self.0, dims).analytic_ratio
    }

    /// Segments `video`; returns the mask and the pipeline seconds.
    #[pyo3(signature = (video, frames_per_pass=5))]
    fn predict(&self, py: Python<'_>, video: &PyVolume, frames_per_pass: usize) -> PyResult<(PyMask, f64)> {
        let p = py
            .detach(|| msunet::pipeline::predict(&self.0, &video.0, &IcaConfig::default(), frames_per_pass))
            .map_err(py_err)?;
        let mask = MaskVolume::new(video.0.dims(), p.labels).map_err(py_err)?;
        Ok((PyMask(mask), p.times.total.as_secs_f64()))
    }
}

/// Worst relative gradient error over the built-in audit graphs.
#[pyfunction]
#[pyo3(signature = (h=1e-3, probes=6, seed=0))]
fn gradcheck(h: f64, probes: usize, seed: u64) -> PyResult<f64> {
    let entries = statnet::audit(h, probes, seed).map_err(py_err)?;
    Ok(entries.iter().map(|e| e.report.worst_relative_error).fold(0.0, f64::max))
}

#[pymodule]
fn msunet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PyScaleSpec>()?;
    m.add_class::<PyArchive>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(collapse, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_rmse, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
