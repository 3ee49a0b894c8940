//! Python bindings. Labels are flat row-major lists of ints (255 = unknown), images flat
//! row-major RGB lists of floats in [0, 1].

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use labelmae::inference::{complete, ModelRegistry, RouteOn};
use labelmae::loss::ClassStats;
use labelmae::masking::MaskStrategy;
use labelmae::{Error, GridSpec, PixelMask, RgbImage, SegLabel};

fn err(e: Error) -> PyErr {
    match e {
        Error::Numeric(_) | Error::EmptyLossSupport => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn label(height: usize, width: usize, values: Vec<u8>) -> PyResult<SegLabel> {
    SegLabel::new(height, width, values).map_err(err)
}

fn image(height: usize, width: usize, values: Vec<f64>) -> PyResult<RgbImage> {
    RgbImage::new(height, width, values).map_err(err)
}

/// Layered fuse map as a flat H·W·(C+3) list.
#[pyfunction]
fn stack_fuse(height: usize, width: usize, label_values: Vec<u8>, image_values: Vec<f64>, class_count: usize) -> PyResult<Vec<f64>> {
    let fused = labelmae::data::stack_fuse(&label(height, width, label_values)?, &image(height, width, image_values)?, class_count).map_err(err)?;
    Ok(fused.data.iter().copied().collect())
}

/// Returns (dropped, kept) patch indices.
#[pyfunction]
#[pyo3(signature = (height, width, label_values, patch_size, ratio, strategy, seed))]
fn select_patches(
    height: usize,
    width: usize,
    label_values: Vec<u8>,
    patch_size: usize,
    ratio: f64,
    strategy: &str,
    seed: u64,
) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let grid = GridSpec::new(height, width, patch_size).map_err(err)?;
    let strategy: MaskStrategy = strategy.parse().map_err(err)?;
    let plan = labelmae::masking::select_patches(&label(height, width, label_values)?, &grid, ratio, strategy, seed).map_err(err)?;
    Ok((plan.dropped, plan.kept))
}

#[pyfunction]
#[pyo3(signature = (frequencies, beta = 1.0, gamma = 1.0, xi = 1e-6))]
fn class_weights(frequencies: Vec<f64>, beta: f64, gamma: f64, xi: f64) -> PyResult<Vec<f64>> {
    Ok(labelmae::loss::class_weights(&ClassStats::from_frequencies(frequencies), beta, gamma, xi)
        .map_err(err)?
        .weights)
}

/// Returns (mIoU, PA-mIoU); `mask` is a flat 0/1 list marking the evaluated area.
#[pyfunction]
fn pa_miou(height: usize, width: usize, pred: Vec<u8>, truth: Vec<u8>, mask: Vec<u8>, class_count: usize) -> PyResult<(f64, f64)> {
    let mask = PixelMask::new(height, width, mask).map_err(err)?;
    let r = labelmae::metrics::pa_miou(&label(height, width, pred)?, &label(height, width, truth)?, &mask, class_count).map_err(err)?;
    Ok((r.miou, r.pa_miou))
}

/// Fills the unknown pixels of a label using the models listed in `reg.json`.
#[pyfunction]
#[pyo3(signature = (registry_path, height, width, label_values, image_values, route_on = "unknown"))]
fn complete_label(
    registry_path: &str,
    height: usize,
    width: usize,
    label_values: Vec<u8>,
    image_values: Vec<f64>,
    route_on: &str,
) -> PyResult<Vec<u8>> {
    let registry = ModelRegistry::load(std::path::Path::new(registry_path)).map_err(err)?;
    let route = match route_on {
        "unknown" => RouteOn::Unknown,
        "background" => RouteOn::Background,
        other => return Err(PyValueError::new_err(format!("route_on must be unknown|background, got {other}"))),
    };
    let out = complete(&label(height, width, label_values)?, &image(height, width, image_values)?, &registry, route).map_err(err)?;
    Ok(out.label.values)
}

#[pyclass(name = "PlateauSchedule")]
struct PyPlateauSchedule {
    inner: labelmae::training::PlateauSchedule,
}

#[pymethods]
impl PyPlateauSchedule {
    #[new]
    #[pyo3(signature = (patience = 5, threshold = 0.001, factor = 0.8))]
    fn new(patience: usize, threshold: f64, factor: f64) -> PyResult<Self> {
        Ok(Self {
            inner: labelmae::training::PlateauSchedule::new(patience, threshold, factor).map_err(err)?,
        })
    }

    /// Feeds one epoch loss; returns the learning-rate multiplier (1.0 or the factor).
    fn step(&mut self, epoch_loss: f64) -> PyResult<f64> {
        self.inner.step(epoch_loss).map_err(err)
    }
}

#[pymodule]
fn labelmae_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(stack_fuse, m)?)?;
    m.add_function(wrap_pyfunction!(select_patches, m)?)?;
    m.add_function(wrap_pyfunction!(class_weights, m)?)?;
    m.add_function(wrap_pyfunction!(pa_miou, m)?)?;
    m.add_function(wrap_pyfunction!(complete_label, m)?)?;
    m.add_class::<PyPlateauSchedule>()?;
    Ok(())
}
