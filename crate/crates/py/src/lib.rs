//! Python bindings: datasets, models, training, evaluation, interpretation
//! reports and the gradient check. Configs cross the boundary as dicts and
//! come back as dicts.

use std::path::PathBuf;

use asdformer_core::data::{self, ConnectomeDataset, SynthConfig, DEFAULT_FRACTIONS};
use asdformer_core::gradcheck::{self as gc, GradcheckOptions};
use asdformer_core::interpret::{build_report, report_json, HeadMode, InterpretOptions};
use asdformer_core::model::{self, ModelConfig, RngState};
use asdformer_core::numerics::{Fault, Tensor};
use asdformer_core::training::{self, ThresholdRule, TrainConfig};
use asdformer_core::Error;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIndexError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(
    asdformer,
    ComputationError,
    PyException,
    "Numerical failure such as divergence."
);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Csv { .. } => PyOSError::new_err(e.to_string()),
        Error::Shape { .. } | Error::Contract(_) | Error::Divergence { .. } | Error::Metric(_) => {
            ComputationError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn from_dict<T: DeserializeOwned + Default>(py: Python<'_>, d: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Some(d) = d else { return Ok(T::default()) };
    let text: String = py.import("json")?.call_method1("dumps", (d,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_object(py: Python<'_>, value: &impl Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn matrix(t: &Tensor) -> Vec<Vec<f64>> {
    t.rows().map(<[f64]>::to_vec).collect()
}

/// A labelled set of functional-connectivity matrices.
#[pyclass(module = "asdformer", frozen)]
struct Dataset {
    inner: ConnectomeDataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let path = if path.is_dir() {
            path.join("manifest.json")
        } else {
            path
        };
        Ok(Self {
            inner: data::load_dataset(&path).map_err(to_py)?,
        })
    }

    /// Writes manifest, community file and FC CSVs; returns the manifest path.
    fn save(&self, dir: PathBuf) -> PyResult<PathBuf> {
        data::save_dataset(&self.inner, &dir).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn n_rois(&self) -> usize {
        self.inner.n_rois
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.inner.subjects.iter().map(|s| s.id.clone()).collect()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels()
    }

    #[getter]
    fn communities(&self) -> Vec<String> {
        (0..self.inner.n_rois)
            .map(|i| self.inner.community_map.name_of(i).unwrap_or_default().to_string())
            .collect()
    }

    fn fc(&self, index: usize) -> PyResult<Vec<Vec<f64>>> {
        let s = self
            .inner
            .subjects
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("subject {index} out of range")))?;
        Ok(matrix(&s.fc))
    }

    fn subset(&self, indices: Vec<usize>) -> PyResult<Self> {
        if let Some(i) = indices.iter().find(|&&i| i >= self.inner.len()) {
            return Err(PyIndexError::new_err(format!("subject {i} out of range")));
        }
        Ok(Self {
            inner: self.inner.subset(&indices),
        })
    }

    /// Stratified (train, val, test) split.
    #[pyo3(signature = (seed=0, fractions=None))]
    fn split(&self, seed: u64, fractions: Option<[f64; 3]>) -> PyResult<(Self, Self, Self)> {
        let s = data::stratified_split(&self.inner, fractions.unwrap_or(DEFAULT_FRACTIONS), seed).map_err(to_py)?;
        Ok((Self { inner: s.train }, Self { inner: s.val }, Self { inner: s.test }))
    }

    fn __repr__(&self) -> String {
        let [hc, asd] = self.inner.class_counts();
        format!(
            "Dataset(subjects={}, n_rois={}, hc={hc}, asd={asd})",
            self.inner.len(),
            self.inner.n_rois
        )
    }
}

/// Planted-signal dataset; keys as in the `synth` config section.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn synth(py: Python<'_>, config: Option<&Bound<'_, PyDict>>) -> PyResult<Dataset> {
    let cfg: SynthConfig = from_dict(py, config)?;
    Ok(Dataset {
        inner: data::synth_generate(&cfg).map_err(to_py)?,
    })
}

#[pyclass(module = "asdformer", frozen)]
struct Model {
    inner: model::Model,
}

#[pymethods]
impl Model {
    /// Freshly initialised model; missing config keys take their defaults.
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(py: Python<'_>, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg: ModelConfig = from_dict(py, config)?;
        Ok(Self {
            inner: model::Model::init(cfg).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: model::load_model(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let rng = RngState {
            algorithm: "ChaCha8Rng".into(),
            seed: self.inner.config.seed,
            word_pos: "0".into(),
        };
        model::save_model(&self.inner, rng, &path).map_err(to_py)
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_object(py, &self.inner.config)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.params.leaves().iter().map(|t| t.len()).sum()
    }

    /// `[B, C]` logits for the chosen subjects (all by default).
    #[pyo3(signature = (dataset, indices=None))]
    fn logits(&self, dataset: &Dataset, indices: Option<Vec<usize>>) -> PyResult<Vec<Vec<f64>>> {
        let indices = indices.unwrap_or_else(|| (0..dataset.inner.len()).collect());
        let x = dataset.inner.batch(&indices).map_err(to_py)?;
        Ok(matrix(&self.inner.logits(&x).map_err(to_py)?))
    }

    /// AUROC, accuracy, sensitivity, specificity and confusion counts.
    #[pyo3(signature = (dataset, threshold=None))]
    fn evaluate(&self, py: Python<'_>, dataset: &Dataset, threshold: Option<f64>) -> PyResult<Py<PyAny>> {
        let rule = threshold.map_or(ThresholdRule::Argmax, ThresholdRule::Score);
        let m = training::evaluate(&self.inner, &dataset.inner, rule).map_err(to_py)?;
        to_object(py, &m)
    }

    /// Interpretation report for one subject, as the JSON dict that
    /// `interpret` writes (values at 6 decimal places).
    #[pyo3(signature = (dataset, subject_id, head_mode="mean", layer=None))]
    fn interpret(
        &self,
        py: Python<'_>,
        dataset: &Dataset,
        subject_id: &str,
        head_mode: &str,
        layer: Option<usize>,
    ) -> PyResult<Py<PyAny>> {
        let head_mode = match head_mode {
            "mean" => HeadMode::Mean,
            "per_head" | "per-head" => HeadMode::PerHead,
            other => return Err(PyValueError::new_err(format!("unknown head mode {other:?}"))),
        };
        let index = dataset
            .inner
            .subjects
            .iter()
            .position(|s| s.id == subject_id)
            .ok_or_else(|| PyValueError::new_err(format!("unknown subject id {subject_id:?}")))?;
        let (_, trace) = self
            .inner
            .forward(&dataset.inner.batch(&[index]).map_err(to_py)?)
            .map_err(to_py)?;
        let report = build_report(
            &trace,
            0,
            subject_id,
            &dataset.inner.community_map,
            InterpretOptions { layer, head_mode },
        )
        .map_err(to_py)?;
        let text = report_json(&report).map_err(to_py)?;
        Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(n_rois={}, embed_dim={}, heads={}, experts={}, k={:?}, decoder={:?})",
            c.n_rois, c.embed_dim, c.heads, c.num_experts, c.k_per_expert, c.decoder
        )
    }
}

/// Trains a copy of `model`; returns the best snapshot and the epoch history.
#[pyfunction]
#[pyo3(signature = (model, train, val, config=None))]
fn train(
    py: Python<'_>,
    model: &Model,
    train: &Dataset,
    val: &Dataset,
    config: Option<&Bound<'_, PyDict>>,
) -> PyResult<(Model, Py<PyAny>)> {
    let cfg: TrainConfig = from_dict(py, config)?;
    let out = training::train(&model.inner, &train.inner, &val.inner, &cfg).map_err(to_py)?;
    Ok((Model { inner: out.model }, to_object(py, &out.history)?))
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<usize>) -> PyResult<f64> {
    training::auroc(&scores, &labels).map_err(to_py)
}

/// Pearson correlation matrix of a `[T, N]` time series.
#[pyfunction]
fn pearson_fc(timeseries: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let t = Tensor::from_rows(&timeseries).map_err(to_py)?;
    Ok(matrix(&data::pearson_fc(&t).map_err(to_py)?))
}

/// Finite-difference check of the toy model's gradients.
#[pyfunction]
#[pyo3(signature = (seed=None, floor=None, inject_fault=false))]
fn gradcheck(py: Python<'_>, seed: Option<u64>, floor: Option<f64>, inject_fault: bool) -> PyResult<Py<PyAny>> {
    let mut options = GradcheckOptions::toy();
    if let Some(s) = seed {
        options.seed = s;
    }
    if let Some(f) = floor {
        options.floor = f;
    }
    options.fault = inject_fault.then_some(Fault::GeluBackward);
    let report = gc::run(&options).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("passed", report.passed())?;
    out.set_item("max_relative_error", report.max_relative_error())?;
    out.set_item("groups", to_object(py, &report.groups)?)?;
    Ok(out.into_any().unbind())
}

#[pymodule]
fn asdformer(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(pearson_fc, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("ComputationError", m.py().get_type::<ComputationError>())?;
    m.add("COMMUNITY_NAMES", data::COMMUNITY_NAMES.to_vec())?;
    Ok(())
}
