//! Python bindings: configs, pipeline steps, trained detectors and the
//! scoring helpers.

use std::path::PathBuf;

use fsod_core::boxes;
use fsod_core::detector::{hungarian_match, Detector};
use fsod_core::diffcore::Checkpoint;
use fsod_core::ensemble::{self, EnsembleConfig};
use fsod_core::eval;
use fsod_core::pipeline::{self, ExperimentConfig, RunOptions, Status};
use fsod_core::synthdata::Raster;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

#[pyclass(name = "Config", module = "fsod", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self { inner: ExperimentConfig::default() }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ExperimentConfig::load(&path).map(|inner| Self { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        ExperimentConfig::from_toml_str(text).map(|inner| Self { inner }).map_err(value_err)
    }

    /// Tiny budgets that finish in seconds.
    #[staticmethod]
    fn smoke() -> Self {
        Self { inner: ExperimentConfig::smoke() }
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output_dir.clone()
    }

    #[setter]
    fn set_output_dir(&mut self, dir: PathBuf) {
        self.inner.output_dir = dir;
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }

    #[setter]
    fn set_seeds(&mut self, seeds: Vec<u64>) -> PyResult<()> {
        let mut c = self.inner.clone();
        c.seeds = seeds;
        c.validate().map_err(value_err)?;
        self.inner = c;
        Ok(())
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.ensemble.alpha()
    }
}

/// Runs one pipeline step (`gen-data`, `train-base`, `train-pcf`,
/// `train-novel`, `build-prototypes` or `evaluate`) and returns
/// `(artifact, status)` pairs.
#[pyfunction]
#[pyo3(signature = (command, config, seed=None, k=None, force=false))]
fn run(command: &str, config: &PyConfig, seed: Option<u64>, k: Option<usize>, force: bool) -> PyResult<Vec<(String, String)>> {
    let step = match command {
        "gen-data" => pipeline::gen_data,
        "train-base" => pipeline::train_base,
        "train-pcf" => pipeline::train_pcf,
        "train-novel" => pipeline::train_novel,
        "build-prototypes" => pipeline::build_prototypes,
        "evaluate" => pipeline::evaluate,
        other => return Err(PyValueError::new_err(format!("unknown step {other:?}"))),
    };
    let opts = RunOptions { seed, k, force };
    let out = step(&config.inner, &opts).map_err(runtime_err)?;
    Ok(out
        .into_iter()
        .map(|o| {
            let s = if o.status == Status::Created { "created" } else { "skipped" };
            (o.artifact.display().to_string(), s.to_string())
        })
        .collect())
}

/// Writes report.md and shot_curve.csv; returns the report path.
#[pyfunction]
fn report(config: &PyConfig) -> PyResult<String> {
    pipeline::report(&config.inner, &RunOptions::default())
        .map(|p| p.display().to_string())
        .map_err(runtime_err)
}

#[pyclass(name = "Detector", module = "fsod")]
struct PyDetector {
    inner: Detector,
}

#[pymethods]
impl PyDetector {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(value_err)?;
        Detector::from_checkpoint(&ck).map(|inner| Self { inner }).map_err(value_err)
    }

    #[getter]
    fn label_map(&self) -> Vec<usize> {
        self.inner.label_map().to_vec()
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.config().image_size
    }

    /// Detects on a channel-major `[3, H, W]` image given as a flat list.
    /// Returns `(class_id, score, [cx, cy, w, h])` sorted by score.
    fn detect(&self, pixels: Vec<f32>) -> PyResult<Vec<(usize, f64, [f64; 4])>> {
        let s = self.inner.config().image_size;
        if pixels.len() != 3 * s * s {
            return Err(PyValueError::new_err(format!("expected {} values, got {}", 3 * s * s, pixels.len())));
        }
        let raster = Raster {
            channels: 3,
            height: s,
            width: s,
            data: pixels,
        };
        let dets = self.inner.detect(&raster).map_err(runtime_err)?;
        Ok(dets.into_iter().map(|d| (d.class_id, d.score, d.bbox)).collect())
    }
}

#[pyclass(name = "PrototypeBank", module = "fsod")]
struct PyPrototypeBank {
    inner: ensemble::PrototypeBank,
}

#[pymethods]
impl PyPrototypeBank {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ensemble::PrototypeBank::load(&path).map(|inner| Self { inner }).map_err(value_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn classes(&self) -> Vec<usize> {
        self.inner.prototypes.keys().copied().collect()
    }

    fn get(&self, class_id: usize) -> PyResult<Vec<f64>> {
        self.inner.get(class_id).map(<[f64]>::to_vec).map_err(value_err)
    }
}

#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    boxes::iou(a, b)
}

#[pyfunction]
fn giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    boxes::giou(a, b)
}

#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("vectors differ in length"));
    }
    Ok(ensemble::cosine(&a, &b))
}

/// Blended score `alpha * score + beta * similarity`; `beta` defaults to `1 - alpha`.
#[pyfunction]
#[pyo3(signature = (score, similarity, alpha, beta=None))]
fn ensemble_score(score: f64, similarity: f64, alpha: f64, beta: Option<f64>) -> PyResult<f64> {
    let cfg = EnsembleConfig::new(alpha, beta.unwrap_or(1.0 - alpha)).map_err(value_err)?;
    Ok(ensemble::ensemble_scores(score, similarity, &cfg))
}

/// Minimum-cost assignment; returns `(row, column)` pairs, one per column.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<(Vec<(usize, usize)>, f64)> {
    hungarian_match(&cost).map(|a| (a.pairs, a.total_cost)).map_err(value_err)
}

/// Single-class AP at one IoU threshold; `None` when there is no ground truth.
#[pyfunction]
#[pyo3(signature = (detections, ground_truth, threshold=0.5))]
fn average_precision(detections: Vec<(f64, [f64; 4])>, ground_truth: Vec<[f64; 4]>, threshold: f64) -> Option<f64> {
    let records = eval::match_detections(&detections, &ground_truth, threshold);
    eval::average_precision(&records, ground_truth.len())
}

#[pymodule]
fn fsod(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDetector>()?;
    m.add_class::<PyPrototypeBank>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(giou, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_score, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add("DEFAULT_ALPHA", ensemble::DEFAULT_ALPHA)?;
    Ok(())
}
