//! Python bindings: losses, metrics, ensembling, diagnostics, synthetic
//! images, augmentation, run configs and checkpoints.

use std::path::PathBuf;

use dfdetect::augment::{apply_transform, TransformKind};
use dfdetect::cli::{run_recipe as recipe, run_selftest, RunConfig};
use dfdetect::diagnostics;
use dfdetect::ensemble::{majority_vote_render as vote_render, Vote};
use dfdetect::image::ImageTensor;
use dfdetect::losses::{self, SupConConfig};
use dfdetect::metrics::{self, MetricsReport};
use dfdetect::nn::Tensor;
use dfdetect::pipeline::{evaluate, load_checkpoint, save_checkpoint, Dataset, ModelCheckpoint};
use dfdetect::sampling::partition_ids as partition;
use dfdetect::synth::{generate_real_image, inject_fake_artifact, FakeKind, FakeMethodSpec};
use dfdetect::Error;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must have equal length"));
    }
    Tensor::new(vec![n, d], rows.into_iter().flatten().collect()).map_err(to_py)
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.batch()).map(|i| t.row(i).to_vec()).collect()
}

fn parse_kind<T: serde::de::DeserializeOwned>(name: &str, what: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(name.into()))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} `{name}`")))
}

/// Mean multi-positive SupCon loss over unit-norm rows. Returns
/// `(loss, grad, warning)`; `warning` is set when no anchor had a positive.
#[pyfunction]
#[pyo3(signature = (embeddings, labels, temperature=0.07))]
fn supcon_loss(embeddings: Vec<Vec<f64>>, labels: Vec<u8>, temperature: f64) -> PyResult<(f64, Vec<Vec<f64>>, bool)> {
    let r = losses::supcon_loss(&matrix(embeddings)?, &labels, &SupConConfig { temperature }).map_err(to_py)?;
    Ok((r.loss, rows(&r.grad), r.warning))
}

/// Mean binary cross-entropy on logits. Returns `(loss, grad)`.
#[pyfunction]
fn bce_logits_loss(logits: Vec<f64>, labels: Vec<u8>) -> PyResult<(f64, Vec<f64>)> {
    let n = logits.len();
    let r = losses::bce_logits_loss(&Tensor::new(vec![n], logits).map_err(to_py)?, &labels).map_err(to_py)?;
    Ok((r.loss, r.grad.into_data()))
}

/// `("real" | "fake", rendered probability)` for three member probabilities.
#[pyfunction]
fn majority_vote_render(probs: [f64; 3]) -> PyResult<(String, f64)> {
    let d = vote_render(probs).map_err(to_py)?;
    let vote = match d.vote {
        Vote::Real => "real",
        Vote::Fake => "fake",
    };
    Ok((vote.into(), d.rendered))
}

#[pyclass(frozen, get_all)]
#[derive(Clone)]
struct Metrics {
    accuracy: f64,
    f1: f64,
    precision: f64,
    recall: f64,
    auc: Option<f64>,
    tp: u64,
    fp: u64,
    tn: u64,
    fn_: u64,
    threshold: f64,
}

impl From<&MetricsReport> for Metrics {
    fn from(m: &MetricsReport) -> Self {
        let c = m.confusion.unwrap_or_default();
        Self {
            accuracy: m.accuracy,
            f1: m.f1,
            precision: m.precision,
            recall: m.recall,
            auc: m.auc,
            tp: c.tp,
            fp: c.fp,
            tn: c.tn,
            fn_: c.fn_,
            threshold: m.threshold,
        }
    }
}

#[pymethods]
impl Metrics {
    fn __repr__(&self) -> String {
        let auc = self.auc.map_or("-".into(), |a| format!("{a:.4}"));
        format!(
            "Metrics(accuracy={:.4}, f1={:.4}, precision={:.4}, recall={:.4}, auc={auc})",
            self.accuracy, self.f1, self.precision, self.recall
        )
    }
}

/// Metrics with "real" (label 1) as the positive class.
#[pyfunction]
#[pyo3(signature = (probs, labels, threshold=0.5))]
fn binary_metrics(probs: Vec<f64>, labels: Vec<u8>, threshold: f64) -> PyResult<Metrics> {
    Ok(Metrics::from(&metrics::binary_metrics(&probs, &labels, threshold).map_err(to_py)?))
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::roc_auc(&scores, &labels).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (embeddings, labels, max_per_class=2000, seed=0))]
fn silhouette_score(embeddings: Vec<Vec<f64>>, labels: Vec<u8>, max_per_class: usize, seed: u64) -> PyResult<f64> {
    diagnostics::silhouette_score(&matrix(embeddings)?, &labels, max_per_class, seed).map_err(to_py)
}

#[pyfunction]
fn pca_project(embeddings: Vec<Vec<f64>>) -> PyResult<Vec<(f64, f64)>> {
    let points = diagnostics::pca_project(&matrix(embeddings)?).map_err(to_py)?;
    Ok(points.into_iter().map(|[x, y]| (x, y)).collect())
}

/// Per-model fake subsets from a seeded shuffle and round-robin split.
#[pyfunction]
#[pyo3(signature = (fake_ids, n_models=3, seed=0))]
fn partition_ids(fake_ids: Vec<String>, n_models: usize, seed: u64) -> PyResult<Vec<Vec<String>>> {
    Ok(partition(vec![], fake_ids, vec![], n_models, seed).map_err(to_py)?.subsets)
}

/// RGB image with values in [0, 1], stored row-major.
#[pyclass(frozen)]
#[derive(Clone)]
struct Image {
    inner: ImageTensor,
}

#[pymethods]
impl Image {
    #[new]
    fn new(height: usize, width: usize, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self {
            inner: ImageTensor::from_data(height, width, data).map_err(to_py)?,
        })
    }

    /// Synthetic "real" pattern for `seed`.
    #[staticmethod]
    #[pyo3(signature = (seed, size=32))]
    fn real(seed: u64, size: usize) -> Self {
        Self {
            inner: generate_real_image(seed, size),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ImageTensor::load_png(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_png(&path).map_err(to_py)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn pixel(&self, y: usize, x: usize) -> PyResult<(f32, f32, f32)> {
        if y >= self.inner.height() || x >= self.inner.width() {
            return Err(PyValueError::new_err("pixel out of bounds"));
        }
        let [r, g, b] = self.inner.pixel(y, x);
        Ok((r, g, b))
    }

    /// One of brightness, hue, saturation, rotation, hflip, vflip.
    fn transform(&self, kind: &str, param: f32) -> PyResult<Self> {
        let kind: TransformKind = parse_kind(kind, "transform")?;
        Ok(Self {
            inner: apply_transform(&self.inner, kind, param).map_err(to_py)?,
        })
    }

    /// One of blend-seam, checker-artifact, patch-swap, color-shift.
    #[pyo3(signature = (kind, seed, strength=None))]
    fn inject(&self, kind: &str, seed: u64, strength: Option<f32>) -> PyResult<Self> {
        let kind: FakeKind = parse_kind(kind, "fake method")?;
        let mut spec = FakeMethodSpec::default_for(kind);
        if let Some(s) = strength {
            spec.strength = s;
        }
        Ok(Self {
            inner: inject_fake_artifact(&self.inner, &spec, seed).map_err(to_py)?,
        })
    }

    fn mean_abs_diff(&self, other: &Image) -> f64 {
        self.inner.mean_abs_diff(&other.inner)
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.height(), self.inner.width())
    }
}

/// Run configuration; missing keys take their defaults.
#[pyclass(name = "RunConfig")]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: RunConfig::default(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: RunConfig = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::load(&path).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out_dir.clone()
    }

    #[setter]
    fn set_out_dir(&mut self, dir: PathBuf) {
        self.inner.out_dir = dir;
    }
}

/// Full recipe. Returns per-model metrics by directory name and the
/// ensemble metrics.
#[pyfunction]
#[pyo3(signature = (config, threads=1))]
fn run_recipe(config: &PyRunConfig, threads: usize) -> PyResult<(Vec<(String, Metrics)>, Metrics)> {
    let cfg = &config.inner;
    let out = recipe(cfg, threads).map_err(to_py)?;
    let models = out
        .models
        .iter()
        .enumerate()
        .map(|(i, m)| (cfg.model_dir_name(i), Metrics::from(&m.metrics)))
        .collect();
    Ok((models, Metrics::from(&out.ensemble)))
}

/// Built-in oracle and gradient checks as `(name, passed, detail)`.
#[pyfunction]
fn selftest() -> PyResult<Vec<(String, bool, String)>> {
    Ok(run_selftest()
        .map_err(to_py)?
        .into_iter()
        .map(|c| (c.name, c.passed, c.detail))
        .collect())
}

#[pyclass(frozen)]
struct Checkpoint {
    inner: ModelCheckpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn stage(&self) -> String {
        format!("{:?}", self.inner.stage).to_lowercase()
    }

    #[getter]
    fn backbone(&self) -> &'static str {
        self.inner.backbone_spec.name.name()
    }

    #[getter]
    fn backbone_sha256(&self) -> String {
        self.inner.backbone_sha256.clone()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.backbone.num_params() + self.inner.head.as_ref().map_or(0, |(_, h)| h.num_params())
    }

    /// `(epoch, split, loss, lr)` per logged epoch and split.
    #[getter]
    fn log(&self) -> Vec<(usize, String, f64, f64)> {
        self.inner
            .log
            .iter()
            .map(|e| (e.epoch, e.split.clone(), e.loss, e.lr))
            .collect()
    }

    /// Probability of "real" for each image; needs a classifier checkpoint.
    fn predict(&self, images: Vec<Image>) -> PyResult<Vec<f64>> {
        let samples = images
            .into_iter()
            .enumerate()
            .map(|(i, img)| dfdetect::augment::Sample {
                id: i.to_string(),
                label: 0,
                image: img.inner,
            })
            .collect();
        let preds = evaluate(&self.inner, &Dataset { samples }).map_err(to_py)?;
        Ok(preds.into_iter().map(|p| p.prob).collect())
    }
}

#[pymodule]
fn pydfdetect(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Metrics>()?;
    m.add_class::<Image>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(supcon_loss, m)?)?;
    m.add_function(wrap_pyfunction!(bce_logits_loss, m)?)?;
    m.add_function(wrap_pyfunction!(majority_vote_render, m)?)?;
    m.add_function(wrap_pyfunction!(binary_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(silhouette_score, m)?)?;
    m.add_function(wrap_pyfunction!(pca_project, m)?)?;
    m.add_function(wrap_pyfunction!(partition_ids, m)?)?;
    m.add_function(wrap_pyfunction!(run_recipe, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
