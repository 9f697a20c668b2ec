//! Python bindings for `convrt_core`.
//!
//! Videos cross the boundary as flat `float` lists in T×H×W×C order.
use std::path::PathBuf;

use convrt_core::eval::{evaluate as core_evaluate, EvalReport};
use convrt_core::fields::{feature_param_count, ModelOptions};
use convrt_core::flowlab::{klt_track, warp_error_video, FlowParams, KltParams};
use convrt_core::io::{load_video, save_video, EvalConfig, RunConfig, VideoFormat, VideoVolume};
use convrt_core::losses::DisparityMap;
use convrt_core::optimizer::restore as core_restore;
use convrt_core::oracle::OracleSlot;
use convrt_core::quality::{kendall_tau as core_kendall, select_prompt as core_select, spearman_rho as core_spearman, volume_psnr};
use convrt_core::selfcheck::run_suite;
use convrt_core::turbsim::{default_synthetic, TurbulenceParams};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// A T×H×W×C float video with values in [0, 1].
#[pyclass(name = "Video", module = "convrt", skip_from_py_object)]
#[derive(Clone)]
pub struct PyVideo {
    inner: VideoVolume,
}

#[pymethods]
impl PyVideo {
    #[new]
    fn new(frames: usize, height: usize, width: usize, channels: usize, data: Vec<f32>) -> PyResult<Self> {
        let inner = VideoVolume::new(frames, height, width, channels, data).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Reads a PNG frame directory or an `.fvid` file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = load_video(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    /// Writes `.fvid` when the path has that extension, 16-bit PNG frames otherwise.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let fmt = VideoFormat::for_path(&path);
        save_video(&self.inner, &path, fmt).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    /// `(frames, height, width, channels)`
    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let [t, h, w, c] = self.inner.dims();
        (t, h, w, c)
    }

    fn to_list(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn frame(&self, t: usize) -> PyResult<Vec<f32>> {
        if t >= self.inner.frames() {
            return Err(PyValueError::new_err(format!("frame {t} out of range")));
        }
        Ok(self.inner.frame(t).to_vec())
    }

    fn __len__(&self) -> usize {
        self.inner.frames()
    }

    fn __repr__(&self) -> String {
        format!("Video{:?}", self.inner.dims())
    }
}

/// Renders the synthetic scene and its turbulence-degraded version.
///
/// Returns `(clean, degraded)`.
#[pyfunction]
#[pyo3(signature = (frames=16, height=64, width=64, seed=0, strength=None))]
fn simulate(frames: usize, height: usize, width: usize, seed: u64, strength: Option<f32>) -> PyResult<(PyVideo, PyVideo)> {
    let mut cfg = RunConfig::resolved_default();
    cfg.seed = seed;
    cfg.derive_seeds();
    let mut params: TurbulenceParams = cfg.turbulence.clone();
    if let Some(s) = strength {
        params.strength = s;
    }
    params.validate().map_err(value_err)?;
    let pack = default_synthetic(frames, height, width, cfg.scene_seed(), &params);
    Ok((PyVideo { inner: pack.clean }, PyVideo { inner: pack.degraded }))
}

/// Fits the model to `video` and returns `(restored, per-iteration total loss)`.
#[pyfunction]
#[pyo3(signature = (video, supervision=None, iterations=2000, seed=0, lambda_temp=None, learning_rate=None))]
fn restore(
    py: Python<'_>,
    video: &PyVideo,
    supervision: Option<&PyVideo>,
    iterations: usize,
    seed: u64,
    lambda_temp: Option<f64>,
    learning_rate: Option<f64>,
) -> PyResult<(PyVideo, Vec<f64>)> {
    let observed = video.inner.clone();
    let sup = supervision.map(|s| s.inner.clone()).unwrap_or_else(|| observed.clone());
    if !sup.same_dims(&observed) {
        return Err(PyValueError::new_err("supervision and video differ in shape"));
    }
    let mut cfg = RunConfig::resolved_default();
    cfg.seed = seed;
    cfg.derive_seeds();
    cfg.train.iterations = iterations;
    if let Some(l) = lambda_temp {
        cfg.train.weights.lambda_temp = l;
    }
    if let Some(lr) = learning_rate {
        cfg.train.learning_rate = lr;
    }
    let model_cfg = ModelOptions::default().resolve_for(&observed, cfg.model_seed());
    let [t, h, w, _] = observed.dims();
    let disp = DisparityMap::uniform(t, h, w, 0.5);
    let train = cfg.train.clone();
    let (out, _, log) = py
        .detach(move || core_restore(&observed, &sup, &disp, &model_cfg, &train, &mut OracleSlot::none()))
        .map_err(runtime_err)?;
    Ok((PyVideo { inner: out }, log.totals()))
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("psnr", r.psnr)?;
    d.set_item("ssim", r.ssim)?;
    d.set_item("e_warp", r.e_warp)?;
    d.set_item("psnr_xt", r.psnr_xt)?;
    d.set_item("mean_tv", r.mean_tv)?;
    d.set_item("track_smoothness", r.track_smoothness)?;
    d.set_item("track_count", r.track_count)?;
    Ok(d)
}

/// Computes the full metric report; reference metrics are `None` without a reference.
#[pyfunction]
#[pyo3(signature = (video, reference=None))]
fn evaluate<'py>(py: Python<'py>, video: &PyVideo, reference: Option<&PyVideo>) -> PyResult<Bound<'py, PyDict>> {
    let r = core_evaluate(&video.inner, reference.map(|r| &r.inner), &EvalConfig::default()).map_err(value_err)?;
    report_dict(py, &r)
}

#[pyfunction]
fn warp_error(video: &PyVideo) -> PyResult<f64> {
    warp_error_video(&video.inner, &FlowParams::default()).map_err(value_err)
}

#[pyfunction]
fn psnr(a: &PyVideo, b: &PyVideo) -> PyResult<f64> {
    volume_psnr(&a.inner, &b.inner).map_err(value_err)
}

/// Fraction of surviving KLT tracks whose path is shorter than `limit` pixels.
#[pyfunction]
#[pyo3(signature = (video, limit=0.5))]
fn stationary_fraction(video: &PyVideo, limit: f64) -> Option<f64> {
    klt_track(&video.inner, &KltParams::default()).stationary_fraction(limit)
}

#[pyfunction]
fn kendall_tau(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    core_kendall(&a, &b).map_err(value_err)
}

#[pyfunction]
fn spearman_rho(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    core_spearman(&a, &b).map_err(value_err)
}

/// Ranks candidate loss curves by rank agreement with `reference`.
///
/// Returns `(best name, candidate indices best first)`.
#[pyfunction]
fn select_prompt(reference: Vec<f64>, candidates: Vec<(String, Vec<f64>)>) -> PyResult<(String, Vec<usize>)> {
    let rep = core_select(&reference, &candidates).map_err(value_err)?;
    Ok((rep.best().name.clone(), rep.ranking.clone()))
}

/// `(low-rank, full-rank)` feature parameter counts.
#[pyfunction]
fn param_count(q: usize, height: usize, width: usize, frames: usize) -> (usize, usize) {
    feature_param_count(q, height, width, frames)
}

/// Runs the finite-difference suite; returns `[(name, max_rel_err, passed)]`.
#[pyfunction]
fn gradcheck(py: Python<'_>) -> Vec<(String, f64, bool)> {
    py.detach(run_suite).into_iter().map(|c| (c.name, c.max_rel_err, c.passed)).collect()
}

#[pymodule]
fn convrt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVideo>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(restore, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(warp_error, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(stationary_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(kendall_tau, m)?)?;
    m.add_function(wrap_pyfunction!(spearman_rho, m)?)?;
    m.add_function(wrap_pyfunction!(select_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
