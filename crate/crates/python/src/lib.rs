//! Python module `ccnet_py`.
//!
//! Volumes are numpy arrays of shape `(z, y, x)`; spacings are given in
//! the same axis order.

pub mod convert;

use ccnet::datapipe::nrrd;
use ccnet::datapipe::{synth_generate as synth, PatchSpec, SynthConfig};
use ccnet::inference::{binarize, sliding_window_predict, DEFAULT_STRIDE};
use ccnet::metrics;
use ccnet::training::{rampup_weight as rampup, sharpen_value, TrainConfig};
use ccnet::{ArchConfig, CcNet, Grid, ModelSpec, Role, SkipConfig, Tensor, Volume};
use numpy::ndarray::Array3;
use numpy::{IntoPyArray, PyArray3, PyReadonlyArray3};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use convert::{grid_from_flat, shape_from_dims, spacing_from_array_order};

fn py_err(e: ccnet::Error) -> PyErr {
    match e {
        ccnet::Error::Config(_) | ccnet::Error::Shape(_) | ccnet::Error::Usage(_) | ccnet::Error::Data(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_role(role: &str) -> PyResult<Role> {
    role.parse().map_err(py_err)
}

fn to_grid<T: numpy::Element + Copy>(a: &PyReadonlyArray3<'_, T>) -> PyResult<Grid<T>> {
    let view = a.as_array();
    grid_from_flat(view.shape(), view.iter().copied().collect()).map_err(py_err)
}

fn to_array<'py, T: numpy::Element + Clone>(py: Python<'py>, g: Grid<T>) -> PyResult<Bound<'py, PyArray3<T>>> {
    let shape = shape_from_dims(g.dims());
    let arr = Array3::from_shape_vec((shape[0], shape[1], shape[2]), g.into_data())
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(arr.into_pyarray(py))
}

/// Temperature sharpening of a foreground probability.
#[pyfunction]
fn sharpen(p: f64, temperature: f64) -> PyResult<f64> {
    if !(temperature > 0.0) {
        return Err(PyValueError::new_err("temperature must be positive"));
    }
    Ok(sharpen_value(p, temperature))
}

/// Gaussian ramp-up weight of the consistency loss.
#[pyfunction]
#[pyo3(signature = (iteration, max_iteration, lambda_u_max = 1.0))]
fn rampup_weight(iteration: usize, max_iteration: usize, lambda_u_max: f64) -> f64 {
    let cfg = TrainConfig {
        max_iteration,
        lambda_u_max,
        ..Default::default()
    };
    rampup(iteration, &cfg)
}

/// Skip-connection flags of decoder layers 1 (deepest) to 4.
#[pyfunction]
fn skip_config(role: &str) -> PyResult<Vec<bool>> {
    Ok(SkipConfig::for_role(parse_role(role)?).use_skip.to_vec())
}

#[pyfunction]
fn dice(a: PyReadonlyArray3<'_, bool>, b: PyReadonlyArray3<'_, bool>) -> PyResult<f64> {
    metrics::dice(&to_grid(&a)?, &to_grid(&b)?).map_err(py_err)
}

#[pyfunction]
fn jaccard(a: PyReadonlyArray3<'_, bool>, b: PyReadonlyArray3<'_, bool>) -> PyResult<f64> {
    metrics::jaccard(&to_grid(&a)?, &to_grid(&b)?).map_err(py_err)
}

/// 95th-percentile surface distance, `None` when a surface is empty.
#[pyfunction]
#[pyo3(signature = (a, b, spacing = (1.0, 1.0, 1.0)))]
fn hd95(a: PyReadonlyArray3<'_, bool>, b: PyReadonlyArray3<'_, bool>, spacing: (f64, f64, f64)) -> PyResult<Option<f64>> {
    let s = spacing_from_array_order([spacing.0, spacing.1, spacing.2]);
    metrics::hd95(&to_grid(&a)?, &to_grid(&b)?, s).map_err(py_err)
}

/// Average surface distance, `None` when a surface is empty.
#[pyfunction]
#[pyo3(signature = (a, b, spacing = (1.0, 1.0, 1.0)))]
fn asd(a: PyReadonlyArray3<'_, bool>, b: PyReadonlyArray3<'_, bool>, spacing: (f64, f64, f64)) -> PyResult<Option<f64>> {
    let s = spacing_from_array_order([spacing.0, spacing.1, spacing.2]);
    metrics::asd(&to_grid(&a)?, &to_grid(&b)?, s).map_err(py_err)
}

/// Synthetic phantoms as a list of `(image, label)` arrays.
#[pyfunction]
#[pyo3(signature = (n_cases, dims = (64, 64, 64), seed = 1337))]
#[allow(clippy::type_complexity)]
fn synth_generate<'py>(
    py: Python<'py>,
    n_cases: usize,
    dims: (usize, usize, usize),
    seed: u64,
) -> PyResult<Vec<(Bound<'py, PyArray3<f32>>, Bound<'py, PyArray3<bool>>)>> {
    let cfg = SynthConfig {
        n_cases,
        dims: [dims.2, dims.1, dims.0],
        seed,
        ..Default::default()
    };
    synth(&cfg)
        .map_err(py_err)?
        .into_iter()
        .map(|c| {
            let label = c.label.expect("synthetic cases are labeled");
            Ok((to_array(py, c.volume.grid().clone())?, to_array(py, label)?))
        })
        .collect()
}

/// Reads an NRRD volume as `(array, spacing)`.
#[pyfunction]
fn read_nrrd<'py>(py: Python<'py>, path: &str) -> PyResult<(Bound<'py, PyArray3<f32>>, (f64, f64, f64))> {
    let v = nrrd::read_volume(std::path::Path::new(path), "volume").map_err(py_err)?;
    let s = v.spacing();
    Ok((to_array(py, v.grid().clone())?, (s[2], s[1], s[0])))
}

/// The three-model network (main, aux1, aux2).
#[pyclass(name = "CCNet")]
struct PyCcNet {
    net: CcNet<f32>,
}

#[pymethods]
impl PyCcNet {
    #[new]
    #[pyo3(signature = (base_channels = 16, shared_encoder = false, seed = 1337))]
    fn new(base_channels: usize, shared_encoder: bool, seed: u64) -> PyResult<Self> {
        let arch = ArchConfig {
            base_channels,
            shared_encoder,
            ..Default::default()
        };
        Ok(Self {
            net: CcNet::new(&arch, seed).map_err(py_err)?,
        })
    }

    /// Loads a checkpoint written by training.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (net, _) = ccnet::checkpoint::load(std::path::Path::new(path)).map_err(py_err)?;
        Ok(Self { net })
    }

    fn param_count(&self, role: &str) -> PyResult<usize> {
        Ok(self.net.model(parse_role(role)?).param_count())
    }

    fn skip_layers(&self, role: &str) -> PyResult<Vec<usize>> {
        let spec: &ModelSpec = self.net.spec(parse_role(role)?);
        Ok(spec.skip_config.skip_layers())
    }

    /// Foreground probabilities of one model for a `(z, y, x)` patch.
    fn forward<'py>(&self, py: Python<'py>, role: &str, patch: PyReadonlyArray3<'_, f32>) -> PyResult<Bound<'py, PyArray3<f32>>> {
        let g = to_grid(&patch)?;
        let x: Tensor<f32> = Tensor::from_grids([&g]).map_err(py_err)?;
        let p = self.net.model(parse_role(role)?).forward(&x).map_err(py_err)?;
        to_array(py, Grid::new(g.dims(), p.foreground(0).to_vec()).map_err(py_err)?)
    }

    /// Sliding-window main-model mask for a full volume.
    #[pyo3(signature = (volume, patch, stride = None, threshold = 0.5))]
    fn predict<'py>(
        &self,
        py: Python<'py>,
        volume: PyReadonlyArray3<'_, f32>,
        patch: (usize, usize, usize),
        stride: Option<(usize, usize, usize)>,
        threshold: f64,
    ) -> PyResult<Bound<'py, PyArray3<bool>>> {
        let g = to_grid(&volume)?;
        let v = Volume::new("volume", g, [1.0; 3]).map_err(py_err)?;
        let patch = PatchSpec::new([patch.2, patch.1, patch.0]).map_err(py_err)?;
        let stride = stride.map_or(DEFAULT_STRIDE, |s| [s.2, s.1, s.0]);
        let probs = sliding_window_predict(&self.net.main(), &v, &patch, stride).map_err(py_err)?;
        to_array(py, binarize(&probs, threshold))
    }
}

#[pymodule]
fn ccnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(sharpen, m)?)?;
    m.add_function(wrap_pyfunction!(rampup_weight, m)?)?;
    m.add_function(wrap_pyfunction!(skip_config, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(asd, m)?)?;
    m.add_function(wrap_pyfunction!(synth_generate, m)?)?;
    m.add_function(wrap_pyfunction!(read_nrrd, m)?)?;
    m.add_class::<PyCcNet>()?;
    Ok(())
}
