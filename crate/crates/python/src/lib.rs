//! Python bindings: configs, seeded runs, reports, the cost model, FedAvg and metrics.

use festa::experiment::{
    build_report, preset, reference_cost_table, run_seed as run_one, ExperimentConfig, ExperimentError, Overrides,
    ResultRecord, StrategyChoice, TransportKind,
};
use festa::model::{ParamSet, Role};
use festa::protocol::fedavg as fedavg_sets;
use festa::taskbench::{auc_binary, metric_dice, metric_map, Detection};
use festa::tensor::Tensor;
use festa::transport::{closed_form_cost as closed_form, CostModelInput, CostStrategy};
use festa::TaskKind;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn exp_err(e: ExperimentError) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Experiment configuration.
#[pyclass(name = "Config", module = "festa", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults, or the given TOML text.
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(text) => ExperimentConfig::from_toml(text).map_err(exp_err)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ExperimentConfig::load(path.as_ref()).map_err(exp_err)?,
        })
    }

    /// `(variant, config)` pairs of a named preset sweep.
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Vec<(String, PyConfig)>> {
        let plan = preset(name, &ExperimentConfig::default()).map_err(exp_err)?;
        Ok(plan.into_iter().map(|(v, inner)| (v, PyConfig { inner })).collect())
    }

    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (strategy = None, clients = None, tasks = None, rounds = None, k_avg = None,
                        no_avg = false, seeds = None, body = None, transport = None))]
    fn with_overrides(
        &self,
        strategy: Option<&str>,
        clients: Option<usize>,
        tasks: Option<Vec<String>>,
        rounds: Option<u32>,
        k_avg: Option<u32>,
        no_avg: bool,
        seeds: Option<Vec<u64>>,
        body: Option<String>,
        transport: Option<&str>,
    ) -> PyResult<Self> {
        let tasks = tasks
            .map(|ts| ts.iter().map(|t| t.parse::<TaskKind>()).collect::<Result<Vec<_>, _>>())
            .transpose()
            .map_err(value_err)?;
        let ov = Overrides {
            strategy: strategy.map(str::parse::<StrategyChoice>).transpose().map_err(value_err)?,
            clients,
            tasks,
            rounds,
            k_avg,
            no_avg,
            seeds,
            transport: transport.map(str::parse::<TransportKind>).transpose().map_err(value_err)?,
            output: None,
            body,
        };
        let mut inner = self.inner.clone();
        ov.apply(&mut inner);
        Ok(Self { inner })
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(exp_err)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn strategy(&self) -> String {
        self.inner.strategy.to_string()
    }

    #[getter]
    fn rounds(&self) -> u32 {
        self.inner.train.rounds
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.seeds.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(strategy={}, rounds={}, k_avg={}, hash={})",
            self.inner.strategy,
            self.inner.train.rounds,
            self.inner.train.k_avg,
            &self.inner.hash()[..12]
        )
    }
}

/// Outcome of one seed.
#[pyclass(name = "Record", module = "festa", from_py_object)]
#[derive(Clone)]
struct PyRecord {
    inner: ResultRecord,
}

#[pymethods]
impl PyRecord {
    #[getter]
    fn config_hash(&self) -> &str {
        &self.inner.config_hash
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn strategy(&self) -> String {
        self.inner.strategy.to_string()
    }

    #[getter]
    fn wall_ms(&self) -> f64 {
        self.inner.wall_ms
    }

    #[getter]
    fn measured_elements(&self) -> u64 {
        self.inner.cost.measured_elements
    }

    #[getter]
    fn expected_elements(&self) -> f64 {
        self.inner.cost.expected_elements
    }

    /// True when the ledger equals the closed-form cost.
    fn cost_matches(&self) -> bool {
        self.inner.cost.matches()
    }

    /// `(task, metric, accuracy)` per task.
    fn metrics(&self) -> Vec<(String, f64, Option<f64>)> {
        self.inner
            .metrics
            .iter()
            .map(|m| (m.task.to_string(), m.metric, m.accuracy))
            .collect()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("Record(strategy={}, seed={}, metrics={:?})", self.inner.strategy, self.inner.seed, self.metrics())
    }
}

/// Trains and evaluates one seed of `config`.
#[pyfunction]
#[pyo3(signature = (config, seed, variant = "base"))]
fn run_seed(py: Python<'_>, config: &PyConfig, seed: u64, variant: &str) -> PyResult<PyRecord> {
    let cfg = config.inner.clone();
    let variant = variant.to_owned();
    let out = py.detach(move || run_one(&cfg, &variant, seed)).map_err(exp_err)?;
    Ok(PyRecord { inner: out.record })
}

/// Text report (mean ± std and cost table) over records.
#[pyfunction]
fn report(records: Vec<PyRecord>) -> PyResult<String> {
    let recs: Vec<ResultRecord> = records.into_iter().map(|r| r.inner).collect();
    Ok(build_report(&recs).map_err(exp_err)?.to_text())
}

/// Reference cost table rows `(task, method, feat+grad, params, total)` in millions.
#[pyfunction]
#[pyo3(signature = (k = 100))]
fn cost_table(k: u32) -> PyResult<Vec<(String, String, f64, f64, f64)>> {
    let rows = reference_cost_table(k).map_err(exp_err)?;
    Ok(rows
        .into_iter()
        .map(|r| (r.task.to_string(), r.strategy.label().to_owned(), r.feature_gradient, r.parameters, r.total))
        .collect())
}

/// `(feat+grad, params, total)` for one averaging period.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn closed_form_cost(strategy: &str, ph: f64, pb: f64, pt: f64, f: f64, g: f64, k: u32) -> PyResult<(f64, f64, f64)> {
    let s: CostStrategy = strategy.parse().map_err(value_err)?;
    let c = closed_form(s, &CostModelInput { ph, pb, pt, f, g, k }).map_err(value_err)?;
    Ok((c.feature_gradient, c.parameters, c.total()))
}

/// Order-independent elementwise mean of equal-length vectors.
#[pyfunction]
#[pyo3(signature = (members, weights = None))]
fn fedavg(members: Vec<Vec<f32>>, weights: Option<Vec<f64>>) -> PyResult<Vec<f32>> {
    let sets = members
        .into_iter()
        .map(|m| {
            let t = Tensor::new(vec![m.len()], m).map_err(value_err)?;
            ParamSet::from_entries(Role::Head, None, [("head.w".to_owned(), t)]).map_err(value_err)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let refs: Vec<&ParamSet> = sets.iter().collect();
    let avg = fedavg_sets(&refs, weights.as_deref()).map_err(value_err)?;
    Ok(avg.value("head.w").expect("single entry").data().to_vec())
}

/// Binary ranking AUC with half credit for ties; `None` when a class is absent.
#[pyfunction]
fn auc(scores: Vec<f32>, positive: Vec<bool>) -> PyResult<Option<f64>> {
    if scores.len() != positive.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    Ok(auc_binary(&scores, &positive))
}

#[pyfunction]
fn dice(pred: Vec<u8>, gt: Vec<u8>) -> PyResult<f64> {
    if pred.len() != gt.len() {
        return Err(PyValueError::new_err("mask lengths differ"));
    }
    Ok(metric_dice(&pred, &gt))
}

/// Mean AP over IoU 0.40..0.75; detections are `(image, (x, y, w, h), score)`.
#[pyfunction]
fn mean_average_precision(detections: Vec<(usize, [f32; 4], f32)>, ground_truth: Vec<Vec<[f32; 4]>>) -> f64 {
    let dets: Vec<Detection> = detections
        .into_iter()
        .map(|(image, bbox, score)| Detection { image, bbox, score })
        .collect();
    metric_map(&dets, &ground_truth)
}

#[pymodule]
#[pyo3(name = "festa")]
fn festa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyRecord>()?;
    m.add_function(wrap_pyfunction!(run_seed, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(cost_table, m)?)?;
    m.add_function(wrap_pyfunction!(closed_form_cost, m)?)?;
    m.add_function(wrap_pyfunction!(fedavg, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(mean_average_precision, m)?)?;
    m.add("TASKS", TaskKind::ALL.iter().map(|t| t.to_string()).collect::<Vec<_>>())?;
    Ok(())
}
