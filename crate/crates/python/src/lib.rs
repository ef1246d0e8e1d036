//! Python bindings: datasets, configs, training, cross-validation and interpretation.
//!
//! Reports cross the boundary as plain Python objects decoded from the same JSON the CLI writes.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

use structcfn::datakit::{self, SynthMode, SynthSpec};
use structcfn::document::{AnyModel, ModelDocument};
use structcfn::experiments;
use structcfn::gradengine::Differentiable;
use structcfn::interpret;
use structcfn::structnet::{self, Task, Variant};

fn py_err(e: structcfn::Error) -> PyErr {
    match e {
        structcfn::Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_task(task: &str) -> PyResult<Task> {
    match task {
        "reg" | "regression" => Ok(Task::Regression),
        "bin" | "binary" | "classification" => Ok(Task::Binary),
        other => Err(PyValueError::new_err(format!("unknown task '{other}' (reg|bin)"))),
    }
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Architecture and training hyperparameters.
#[pyclass(name = "ModelConfig", module = "structcfn", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: structnet::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (
        n_features,
        task = "reg",
        variant = "differentiable_adaptive",
        seed = 42,
        epochs = 200,
        patience = 20,
        lr = 0.01,
        l1 = 1e-4,
        degree = 2,
        heads = 4,
        batch_size = None,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        n_features: usize,
        task: &str,
        variant: &str,
        seed: u64,
        epochs: usize,
        patience: usize,
        lr: f64,
        l1: f64,
        degree: usize,
        heads: usize,
        batch_size: Option<usize>,
    ) -> PyResult<Self> {
        let variant: Variant = variant.parse().map_err(py_err)?;
        let mut inner = structnet::ModelConfig::new(n_features, parse_task(task)?)
            .with_variant(variant)
            .with_heads(heads);
        inner.seed = seed;
        inner.epochs = epochs;
        inner.patience = patience;
        inner.lr = lr;
        inner.l1 = l1;
        inner.degree = degree;
        inner.batch_size = batch_size;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features
    }

    #[getter]
    fn variant(&self) -> Option<&'static str> {
        self.inner.variant().map(Variant::name)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    /// `{"exact", "enumerated", "formula"}` parameter counts.
    fn param_count<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &structnet::param_count(&self.inner).map_err(py_err)?)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelConfig(n_features={}, variant={:?}, seed={})",
            self.inner.n_features,
            self.inner.variant().map_or("custom", Variant::name),
            self.inner.seed
        )
    }
}

/// A validated table of finite features and a target.
#[pyclass(name = "Dataset", module = "structcfn", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: datakit::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (features, target, task = "reg", feature_names = None, target_name = "y"))]
    fn new(
        features: Vec<Vec<f64>>,
        target: Vec<f64>,
        task: &str,
        feature_names: Option<Vec<String>>,
        target_name: &str,
    ) -> PyResult<Self> {
        let width = features.first().map_or(0, Vec::len);
        if features.iter().any(|r| r.len() != width) {
            return Err(PyValueError::new_err("feature rows have different lengths"));
        }
        let names = feature_names.unwrap_or_else(|| (0..width).map(|k| format!("x{k}")).collect());
        let flat = features.into_iter().flatten().collect();
        let inner = datakit::Dataset::new(flat, target, names, target_name, parse_task(task)?).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, target, task = "reg"))]
    fn from_csv(path: PathBuf, target: &str, task: &str) -> PyResult<Self> {
        let inner = datakit::load_csv(&path, target, parse_task(task)?).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Synthetic manifold with known couplings (`basic` or `extended`).
    #[staticmethod]
    #[pyo3(signature = (mode = "basic", n_samples = 5000, seed = 0))]
    fn synthetic(mode: &str, n_samples: usize, seed: u64) -> PyResult<Self> {
        let mode: SynthMode = mode.parse().map_err(py_err)?;
        let inner = datakit::synth_generate(&SynthSpec::new(mode, n_samples, seed)).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Copy standardized with statistics of all rows.
    fn standardized(&self) -> PyResult<Self> {
        Ok(Self {
            inner: experiments::standardize_all(&self.inner).map_err(py_err)?,
        })
    }

    #[getter]
    fn n_rows(&self) -> usize {
        self.inner.n_rows()
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }

    #[getter]
    fn feature_names(&self) -> Vec<String> {
        self.inner.feature_names().to_vec()
    }

    #[getter]
    fn target(&self) -> Vec<f64> {
        self.inner.target().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.n_rows()
    }
}

/// A trained model (structural network or MLP baseline) with its document metadata.
#[pyclass(name = "Model", module = "structcfn")]
struct PyModel {
    model: AnyModel,
    doc: ModelDocument,
}

impl PyModel {
    fn from_doc(doc: ModelDocument) -> PyResult<Self> {
        Ok(Self {
            model: doc.to_model().map_err(py_err)?,
            doc,
        })
    }

    fn cfn(&self) -> PyResult<&structnet::StructuralCfn> {
        match &self.model {
            AnyModel::Cfn(m) => Ok(m),
            AnyModel::Mlp(_) => Err(PyValueError::new_err(
                "interpretation needs a structural model, not the MLP",
            )),
        }
    }

    fn names(&self) -> Vec<String> {
        self.doc.feature_names.clone()
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Self::from_doc(ModelDocument::load(&path).map_err(py_err)?)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Self::from_doc(ModelDocument::from_json(text).map_err(py_err)?)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.doc.save(&path).map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.doc.to_json().map_err(py_err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.model {
            AnyModel::Cfn(_) => "structural_cfn",
            AnyModel::Mlp(_) => "mlp",
        }
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.model.store().len()
    }

    #[getter]
    fn feature_names(&self) -> Vec<String> {
        self.names()
    }

    /// Raw outputs (logits for binary tasks) on already-standardized rows.
    fn predict(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let model: &dyn Differentiable = match &self.model {
            AnyModel::Cfn(m) => m,
            AnyModel::Mlp(m) => m,
        };
        rows.iter()
            .map(|r| {
                if r.len() != model.n_inputs() {
                    return Err(PyValueError::new_err(format!(
                        "expected {} features, got {}",
                        model.n_inputs(),
                        r.len()
                    )));
                }
                Ok(model.predict_raw(r))
            })
            .collect()
    }

    /// Contexts `z` of one standardized row.
    fn contexts(&self, row: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.cfn()?.forward(&row).map_err(py_err)?.z)
    }

    /// Row-normalized interaction schema `M[i][j]`: influence of feature j on node i.
    fn dependency_matrix(&self) -> PyResult<Vec<Vec<f64>>> {
        Ok(interpret::dependency_matrix(self.cfn()?).m)
    }

    /// The `k` strongest directed couplings as `(i, j)` pairs.
    fn top_k(&self, k: usize) -> PyResult<Vec<(usize, usize)>> {
        interpret::dependency_matrix(self.cfn()?).top_k(k).map_err(py_err)
    }

    fn gate_physics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let report = interpret::gate_physics(self.cfn()?).map_err(py_err)?;
        to_py(py, &report)
    }

    /// Closed-form response of node `i` to feature `j` with the other inputs at zero.
    #[pyo3(signature = (i, j, grid_points = 101, grid_range = 3.0))]
    fn symbolic_law<'py>(
        &self,
        py: Python<'py>,
        i: usize,
        j: usize,
        grid_points: usize,
        grid_range: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let grid = interpret::linspace(-grid_range, grid_range, grid_points);
        let law = interpret::extract_symbolic(self.cfn()?, i, j, &grid, &self.names()).map_err(py_err)?;
        to_py(py, &law)
    }
}

/// Trains a model on already-standardized data. Returns `(model, report)`.
#[pyfunction]
#[pyo3(signature = (data, config, baseline = false))]
fn train<'py>(
    py: Python<'py>,
    data: &PyDataset,
    config: &PyModelConfig,
    baseline: bool,
) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let ds = &data.inner;
    let names = ds.feature_names().to_vec();
    let (doc, report) = py
        .detach(|| -> structcfn::Result<_> {
            if baseline {
                let (m, r) = experiments::fit_baseline(ds, &config.inner)?;
                let doc = ModelDocument::from_mlp(&m, &config.inner, &names, ds.target_name(), ds.standardization());
                Ok((doc, r))
            } else {
                let (m, r) = experiments::fit(ds, &config.inner)?;
                Ok((
                    ModelDocument::from_cfn(&m, &names, ds.target_name(), ds.standardization()),
                    r,
                ))
            }
        })
        .map_err(py_err)?;
    Ok((PyModel::from_doc(doc)?, to_py(py, &report)?))
}

/// k-fold cross-validation on raw data (each fold is standardized with its train rows).
#[pyfunction]
#[pyo3(signature = (data, config, folds = 10, baseline = false))]
fn cross_validate<'py>(
    py: Python<'py>,
    data: &PyDataset,
    config: &PyModelConfig,
    folds: usize,
    baseline: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let result = py
        .detach(|| experiments::cross_validate(&data.inner, &config.inner, folds, baseline))
        .map_err(py_err)?;
    to_py(py, &result)
}

/// Fraction of model pairs whose `k` strongest couplings coincide.
#[pyfunction]
fn topk_consistency(models: Vec<PyRef<'_, PyModel>>, k: usize) -> PyResult<f64> {
    let schemas = models
        .iter()
        .map(|m| m.cfn().map(interpret::dependency_matrix))
        .collect::<PyResult<Vec<_>>>()?;
    interpret::topk_consistency(&schemas, k).map_err(py_err)
}

#[pymodule(name = "structcfn")]
fn structcfn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(cross_validate, m)?)?;
    m.add_function(wrap_pyfunction!(topk_consistency, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
