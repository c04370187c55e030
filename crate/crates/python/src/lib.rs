//! Python bindings for `attnlab`.
//!
//! Configs cross the boundary as plain dicts that are layered over the
//! desk-scale defaults, and results come back as dicts built from the same
//! JSON the command-line tool writes.

use std::path::PathBuf;

use attnlab::backbone::{BackboneConfig, InsertionPlan, Model, ModelError};
use attnlab::checkpoint;
use attnlab::cost::{self, BenchConfig};
use attnlab::data::{self, Dataset, Normalization, Split, SyntheticConfig, MANIFEST_FILE};
use attnlab::eval::{self, Metric};
use attnlab::nas;
use attnlab::report;
use attnlab::tensor::{Graph, Tensor};
use attnlab::training::{self, TrainConfig, TrainError};
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn train_err(e: TrainError) -> PyErr {
    match e {
        TrainError::NonFinite(_) => PyArithmeticError::new_err(e.to_string()),
        e => value_err(e),
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    // left in so deserialization reports the unknown key
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn dict_to_value(d: &Bound<'_, PyDict>) -> PyResult<Value> {
    let json = d.py().import("json")?;
    let text: String = json.call_method1("dumps", (d,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

/// `defaults` with the entries of `over` layered on top.
fn layered<T: Serialize + DeserializeOwned>(defaults: T, over: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Some(d) = over else { return Ok(defaults) };
    let mut v = serde_json::to_value(defaults).map_err(value_err)?;
    merge(&mut v, dict_to_value(d)?);
    serde_json::from_value(v).map_err(value_err)
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse_metric(name: &str) -> PyResult<Metric> {
    serde_json::from_value(Value::String(name.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown metric {name:?} (cosine|euclidean)")))
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Tensor::new(&[rows.len(), cols], rows.concat()).map_err(value_err)
}

/// Attention blocks keyed by insertion position, written like `cnl@6,8,14`.
#[pyclass(name = "InsertionPlan", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPlan {
    inner: InsertionPlan,
}

#[pymethods]
impl PyPlan {
    #[new]
    #[pyo3(signature = (text = "none"))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: text.parse().map_err(|e: ModelError| value_err(e))?,
        })
    }

    fn positions(&self) -> Vec<usize> {
        self.inner.positions()
    }

    fn kinds(&self) -> Vec<String> {
        self.inner.kinds().iter().map(|k| k.to_string()).collect()
    }

    /// Raise if the plan does not fit the backbone.
    #[pyo3(signature = (config = None))]
    fn validate(&self, config: Option<&PyBackboneConfig>) -> PyResult<()> {
        let cfg = config.map_or_else(default_backbone, |c| c.inner.clone());
        self.inner.validate(&cfg).map_err(value_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }

    fn __repr__(&self) -> String {
        format!("InsertionPlan({:?})", self.inner.to_string())
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

fn default_backbone() -> BackboneConfig {
    BackboneConfig::desk(SyntheticConfig::default().n_train_ids)
}

/// Backbone shape; the defaults are the desk-scale network.
#[pyclass(name = "BackboneConfig", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyBackboneConfig {
    inner: BackboneConfig,
}

#[pymethods]
impl PyBackboneConfig {
    /// Keyword arguments override fields of the desk-scale config.
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let inner = layered(default_backbone(), kwargs)?;
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    /// The full-width, full-resolution backbone.
    #[staticmethod]
    fn full() -> Self {
        Self {
            inner: BackboneConfig::default(),
        }
    }

    #[getter]
    fn num_positions(&self) -> usize {
        self.inner.num_positions()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("BackboneConfig({})", serde_json::to_string(&self.inner).unwrap_or_default())
    }
}

/// An image dataset with train, query and gallery splits.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// The synthetic re-identification set; keyword arguments override its config.
    #[staticmethod]
    #[pyo3(signature = (**kwargs))]
    fn synthetic(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg = layered(SyntheticConfig::default(), kwargs)?;
        let inner = data::generate_synthetic(&cfg).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// PNG images listed in a manifest of `path id cam split` lines.
    #[staticmethod]
    #[pyo3(signature = (root, manifest = None, height = 64, width = 32))]
    fn from_folder(root: PathBuf, manifest: Option<PathBuf>, height: usize, width: usize) -> PyResult<Self> {
        let manifest = manifest.unwrap_or_else(|| root.join(MANIFEST_FILE));
        let inner = data::load_folder_dataset(&root, &manifest, (height, width), Normalization::default())
            .map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Write the images and manifest to `root`.
    fn write_folder(&self, root: PathBuf) -> PyResult<()> {
        self.inner.write_folder(&root).map_err(value_err)
    }

    #[getter]
    fn num_train_ids(&self) -> usize {
        self.inner.num_train_ids()
    }

    /// Image count of each split.
    fn counts(&self) -> std::collections::BTreeMap<String, usize> {
        [Split::Train, Split::Query, Split::Gallery]
            .into_iter()
            .map(|s| (s.name().to_string(), self.inner.indices(s).len()))
            .collect()
    }

    fn manifest(&self) -> String {
        self.inner.manifest().to_text()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// A backbone with attention blocks, holding f32 weights.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Model<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (plan = None, config = None, seed = 0))]
    fn new(plan: Option<&PyPlan>, config: Option<&PyBackboneConfig>, seed: u64) -> PyResult<Self> {
        let cfg = config.map_or_else(default_backbone, |c| c.inner.clone());
        let plan = plan.map_or_else(InsertionPlan::empty, |p| p.inner.clone());
        Ok(Self {
            inner: Model::new(cfg, plan, seed).map_err(value_err)?,
        })
    }

    /// The attention-free ResNet-101 with otherwise the same config.
    #[staticmethod]
    #[pyo3(signature = (config = None, seed = 0))]
    fn resnet101(config: Option<&PyBackboneConfig>, seed: u64) -> PyResult<Self> {
        let cfg = config.map_or_else(default_backbone, |c| c.inner.clone());
        Ok(Self {
            inner: Model::resnet101_reference(&cfg, seed).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load(&path).map_err(value_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(value_err)
    }

    #[getter]
    fn plan(&self) -> PyPlan {
        PyPlan {
            inner: self.inner.plan.clone(),
        }
    }

    #[getter]
    fn config(&self) -> PyBackboneConfig {
        PyBackboneConfig {
            inner: self.inner.config.clone(),
        }
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    /// Eval-mode embeddings of dataset images, one row per index.
    fn features(&self, dataset: &PyDataset, indices: Vec<usize>) -> PyResult<Vec<Vec<f32>>> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= dataset.inner.len()) {
            return Err(PyValueError::new_err(format!("index {bad} out of range")));
        }
        if indices.is_empty() {
            return Ok(Vec::new());
        }
        let batch = dataset.inner.batch::<f32>(&indices);
        let f = self.inner.forward_features(&batch).map_err(value_err)?;
        let d = f.shape()[1];
        Ok(f.data().chunks(d).map(<[f32]>::to_vec).collect())
    }

    fn __repr__(&self) -> String {
        format!("Model({:?}, {} params)", self.inner.plan.to_string(), self.inner.num_params())
    }
}

/// Train in place; `config` overrides the desk-scale training schedule.
#[pyfunction]
#[pyo3(signature = (model, dataset, config = None))]
fn train(py: Python<'_>, mut model: PyRefMut<'_, PyModel>, dataset: &PyDataset, config: Option<&Bound<'_, PyDict>>) -> PyResult<Py<PyAny>> {
    let cfg = layered(TrainConfig::desk(), config)?;
    let log = training::train(&mut model.inner, &dataset.inner, &cfg).map_err(train_err)?;
    to_py(py, &log)
}

/// Re-initialize the classifier for the target, train it alone, then train everything.
#[pyfunction]
#[pyo3(signature = (model, target, step1 = None, step2 = None))]
fn finetune_two_step(
    py: Python<'_>,
    mut model: PyRefMut<'_, PyModel>,
    target: &PyDataset,
    step1: Option<&Bound<'_, PyDict>>,
    step2: Option<&Bound<'_, PyDict>>,
) -> PyResult<Py<PyAny>> {
    let c1 = layered(TrainConfig::desk(), step1)?;
    let c2 = layered(TrainConfig::desk(), step2)?;
    let log = training::finetune_two_step(&mut model.inner, &target.inner, &c1, &c2).map_err(train_err)?;
    to_py(py, &log)
}

/// mAP and CMC of a model on a dataset's query and gallery.
#[pyfunction]
#[pyo3(signature = (model, dataset, metric = "cosine", batch_size = 64))]
fn evaluate(py: Python<'_>, model: &PyModel, dataset: &PyDataset, metric: &str, batch_size: usize) -> PyResult<Py<PyAny>> {
    let r = eval::evaluate_model(&model.inner, &dataset.inner, parse_metric(metric)?, batch_size).map_err(value_err)?;
    to_py(py, &r)
}

/// mAP and CMC from a query-by-gallery distance matrix.
#[pyfunction]
fn evaluate_distances(
    py: Python<'_>,
    dist: Vec<Vec<f64>>,
    query_ids: Vec<i64>,
    query_cams: Vec<usize>,
    gallery_ids: Vec<i64>,
    gallery_cams: Vec<usize>,
) -> PyResult<Py<PyAny>> {
    let d = matrix(&dist)?;
    let r = eval::evaluate(&d, &query_ids, &query_cams, &gallery_ids, &gallery_cams).map_err(value_err)?;
    to_py(py, &r)
}

/// Circle loss of a batch of embeddings, L2-normalized first unless `normalize` is false.
#[pyfunction]
#[pyo3(signature = (features, labels, gamma = 128.0, m = 0.25, normalize = true))]
fn circle_loss(features: Vec<Vec<f64>>, labels: Vec<usize>, gamma: f64, m: f64, normalize: bool) -> PyResult<f64> {
    let f = matrix(&features)?;
    if labels.len() != f.shape()[0] {
        return Err(PyValueError::new_err("one label per feature row is required"));
    }
    let mut g = Graph::inference();
    let mut x = g.input(f);
    if normalize {
        x = g.l2_normalize_rows(x).map_err(value_err)?;
    }
    let l = training::circle_loss(&mut g, x, &labels, gamma, m).map_err(value_err)?;
    Ok(g.value(l).item())
}

/// Per-layer and total multiply-accumulate counts.
#[pyfunction]
fn count_macs(py: Python<'_>, model: &PyModel) -> PyResult<Py<PyAny>> {
    to_py(py, &cost::count_macs(&model.inner))
}

/// Wall-clock forward latency; keyword arguments override the bench config.
#[pyfunction]
#[pyo3(signature = (model, **kwargs))]
fn benchmark_latency(py: Python<'_>, model: &PyModel, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Py<PyAny>> {
    let cfg = layered(BenchConfig::default(), kwargs)?;
    let r = py.detach(|| cost::benchmark_latency(&model.inner, &cfg)).map_err(value_err)?;
    to_py(py, &r)
}

/// Placement rules derived from a search's trials CSV.
#[pyfunction]
#[pyo3(signature = (trials_csv, config = None))]
fn rules_report(py: Python<'_>, trials_csv: &str, config: Option<&PyBackboneConfig>) -> PyResult<Py<PyAny>> {
    let cfg = config.map_or_else(default_backbone, |c| c.inner.clone());
    let trials = nas::read_trials(trials_csv.as_bytes()).map_err(value_err)?;
    to_py(py, &nas::derive_rules_report(&trials, &cfg))
}

/// An mAP-versus-speed scatter plot as SVG text, from CSV text.
#[pyfunction]
#[pyo3(signature = (csv_text, title = "mAP vs inference speed"))]
fn scatter_svg(csv_text: &str, title: &str) -> PyResult<String> {
    let points = report::points_from_csv(csv_text).map_err(value_err)?;
    Ok(report::scatter_svg(&points, title))
}

#[pymodule]
#[pyo3(name = "attnlab")]
pub fn attnlab_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPlan>()?;
    m.add_class::<PyBackboneConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(finetune_two_step, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_distances, m)?)?;
    m.add_function(wrap_pyfunction!(circle_loss, m)?)?;
    m.add_function(wrap_pyfunction!(count_macs, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark_latency, m)?)?;
    m.add_function(wrap_pyfunction!(rules_report, m)?)?;
    m.add_function(wrap_pyfunction!(scatter_svg, m)?)?;
    m.add("SCHEMA_VERSION", attnlab::SCHEMA_VERSION)?;
    Ok(())
}
