//! Python bindings. Structured results cross the boundary as JSON and arrive as
//! plain dicts and lists.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;

use chaosflow::crawler::{load_flow, run_flow, DefaultPolicy, FlowDefinition};
use chaosflow::harness::{self, ArchiveStore, Catalog, GeneratorConfig, RunContext};
use chaosflow::havoc::{decode_headers, encode_headers, FaultSpec, HavocHeaders};
use chaosflow::rca::{score_with_nfr, ScoreWeights};
use chaosflow::simmesh::{execute_at, RequestContext, RpcStatus};
use chaosflow::topology::{self, EdgeRef, Relevance, TierLevel};
use chaosflow::shipped;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "Topology", module = "chaosflow", frozen)]
struct PyTopology {
    inner: topology::Topology,
}

#[pymethods]
impl PyTopology {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        topology::load_topology(text).map(|inner| Self { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn builtin(name: &str) -> PyResult<Self> {
        shipped::topology(name)
            .map(|inner| Self { inner })
            .ok_or_else(|| PyKeyError::new_err(format!("no bundled topology `{name}`")))
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    /// Service name to tier.
    fn services(&self) -> BTreeMap<String, u8> {
        self.inner.services.values().map(|s| (s.name.clone(), s.tier.value())).collect()
    }

    fn entry_points(&self) -> Vec<String> {
        self.inner.entry_points.keys().cloned().collect()
    }

    /// `(caller, callee, endpoint, declared, actual)` for every edge.
    fn edges(&self) -> Vec<(String, String, String, String, String)> {
        let name = |c: topology::Criticality| match c {
            topology::Criticality::Critical => "critical".to_string(),
            topology::Criticality::NonCritical => "non_critical".to_string(),
        };
        self.inner
            .edges()
            .map(|(r, e)| (r.caller, r.callee, r.endpoint, name(e.declared_criticality), name(e.actual_criticality)))
            .collect()
    }

    fn plant_violation(&self, caller: &str, callee: &str, endpoint: &str) -> PyResult<Self> {
        topology::plant_violation(&self.inner, &EdgeRef::new(caller, callee, endpoint))
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    fn to_toml(&self) -> String {
        self.inner.to_document()
    }

    fn __repr__(&self) -> String {
        format!("Topology({:?}, services={})", self.inner.name, self.inner.services.len())
    }
}

#[pyclass(name = "HavocHeaders", module = "chaosflow", frozen)]
struct PyHeaders {
    inner: HavocHeaders,
}

fn parse_faults(faults: Vec<String>) -> PyResult<Vec<FaultSpec>> {
    faults.iter().map(|f| f.parse::<FaultSpec>().map_err(value_err)).collect()
}

#[pymethods]
impl PyHeaders {
    #[new]
    #[pyo3(signature = (run_id, faults = Vec::new(), tenancy = "test"))]
    fn new(run_id: String, faults: Vec<String>, tenancy: &str) -> PyResult<Self> {
        let faults = parse_faults(faults)?;
        let inner = match tenancy {
            "test" => HavocHeaders::test(run_id, faults),
            "production" => HavocHeaders::production(run_id, faults),
            other => return Err(PyValueError::new_err(format!("tenancy must be `test` or `production`, got `{other}`"))),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn decode(raw: Vec<(String, String)>) -> PyResult<Self> {
        decode_headers(&raw).map(|inner| Self { inner }).map_err(value_err)
    }

    fn encode(&self) -> Vec<(String, String)> {
        encode_headers(&self.inner)
    }

    #[getter]
    fn tenancy(&self) -> &'static str {
        self.inner.tenancy.as_str()
    }

    #[getter]
    fn run_id(&self) -> &str {
        &self.inner.run_id
    }

    #[getter]
    fn faults(&self) -> Vec<String> {
        self.inner.faults.iter().map(ToString::to_string).collect()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("HavocHeaders(run_id={:?}, tenancy={:?}, faults={:?})", self.inner.run_id, self.tenancy(), self.faults())
    }
}

/// Canonical text of a fault clause; raises on invalid input.
#[pyfunction]
fn parse_fault(text: &str) -> PyResult<String> {
    text.parse::<FaultSpec>().map(|f| f.to_string()).map_err(value_err)
}

/// Network log of one request as a list of dicts.
#[pyfunction]
#[pyo3(signature = (topology, entry, headers, seed = 0))]
fn execute<'py>(py: Python<'py>, topology: &PyTopology, entry: &str, headers: &PyHeaders, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let ex = execute_at(&topology.inner, entry, &headers.inner, RequestContext::new(seed)).map_err(value_err)?;
    to_py(py, &ex.log)
}

fn flow_from(name_or_toml: &str) -> PyResult<FlowDefinition> {
    match shipped::flow(name_or_toml) {
        Some(f) => Ok(f),
        None => load_flow(name_or_toml).map_err(value_err),
    }
}

/// Runs a flow with the default policy. `flow` is a bundled flow name or a TOML document.
#[pyfunction]
#[pyo3(signature = (topology, flow, headers, seed = 0))]
fn crawl<'py>(py: Python<'py>, topology: &PyTopology, flow: &str, headers: &PyHeaders, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let flow = flow_from(flow)?;
    let run = run_flow(&flow, &topology.inner, &headers.inner, &DefaultPolicy, seed).map_err(value_err)?;
    let doc = serde_json::json!({ "result": run.result, "log": run.log });
    to_py(py, &doc)
}

/// Causal score with the default weights. `status` is an HTTP code or `"timed_out"`.
#[pyfunction]
fn causal_score(status: &Bound<'_, PyAny>, nfr: f64, tier: u8, category: &str) -> PyResult<f64> {
    let status = if let Ok(code) = status.extract::<u16>() {
        RpcStatus::Code(code)
    } else if status.extract::<String>().is_ok_and(|s| s == "timed_out") {
        RpcStatus::TimedOut
    } else {
        return Err(PyValueError::new_err("status must be an integer code or \"timed_out\""));
    };
    let tier = TierLevel::new(tier).ok_or_else(|| PyValueError::new_err(format!("tier {tier} outside 0..=5")))?;
    let category: Relevance = serde_json::from_value(serde_json::Value::String(category.into())).map_err(value_err)?;
    let record = chaosflow::RpcRecord {
        caller: String::new(),
        callee: String::new(),
        endpoint: String::new(),
        start_ms: 0,
        end_ms: 0,
        status_code: status,
        injected: false,
        degraded: false,
        app_instance: Default::default(),
    };
    Ok(score_with_nfr(&record, nfr, tier, category, &ScoreWeights::default()).score)
}

#[pyfunction]
fn precision_at_k(decisions: Vec<(Vec<String>, String)>, ks: Vec<usize>) -> PyResult<BTreeMap<usize, f64>> {
    harness::precision_at_k(&decisions, &ks).map_err(value_err)
}

#[pyfunction]
fn latency_percentiles(durations: Vec<u64>) -> PyResult<(u64, u64, u64)> {
    harness::latency_percentiles(&durations).map(|p| (p.p50, p.p95, p.p99)).map_err(value_err)
}

#[pyfunction]
fn vqa_confusion(pairs: Vec<(bool, bool)>) -> PyResult<[[f64; 2]; 2]> {
    harness::vqa_confusion(&pairs).map_err(value_err)
}

fn load_config(path: &Path) -> PyResult<(GeneratorConfig, Catalog)> {
    let cfg = GeneratorConfig::load(path).map_err(value_err)?;
    let catalog = Catalog::load(&cfg, path.parent().unwrap_or(Path::new("."))).map_err(value_err)?;
    Ok((cfg, catalog))
}

#[pyfunction]
fn generate_scenarios<'py>(py: Python<'py>, config: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let (cfg, catalog) = load_config(&config)?;
    to_py(py, &harness::generate_scenarios(&cfg, &catalog).map_err(value_err)?)
}

/// Runs every scenario of a config; writes archives when `out` is given.
/// Returns one `{run_id, scenario, mode, verdict, digest}` dict per run.
#[pyfunction]
#[pyo3(signature = (config, out = None))]
fn run_config<'py>(py: Python<'py>, config: PathBuf, out: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let (cfg, catalog) = load_config(&config)?;
    let scenarios = harness::generate_scenarios(&cfg, &catalog).map_err(value_err)?;
    let store = out.map(ArchiveStore::open).transpose().map_err(value_err)?;
    let ctx = RunContext::from_config(&catalog, &cfg);
    let pairs = py.detach(|| harness::run_batch(&scenarios, &ctx, store.as_ref())).map_err(value_err)?;
    let rows: Vec<serde_json::Value> = pairs
        .iter()
        .flat_map(|p| [&p.baseline, &p.chaos])
        .map(|a| {
            serde_json::json!({
                "run_id": a.run_id,
                "scenario": a.scenario.id,
                "mode": a.mode,
                "verdict": a.result.verdict.to_string(),
                "digest": a.digest,
                "planted_rank": a.planted_rank(),
            })
        })
        .collect();
    to_py(py, &rows)
}

/// Markdown report and metric lines over an archive directory.
#[pyfunction]
fn evaluate(archives: PathBuf) -> PyResult<(String, String)> {
    let all = ArchiveStore::load_all(&archives).map_err(value_err)?;
    let report = harness::evaluate(&all).map_err(value_err)?;
    Ok((report.to_markdown(), report.metric_lines()))
}

#[pymodule]
pub fn chaosflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTopology>()?;
    m.add_class::<PyHeaders>()?;
    m.add_function(wrap_pyfunction!(parse_fault, m)?)?;
    m.add_function(wrap_pyfunction!(execute, m)?)?;
    m.add_function(wrap_pyfunction!(crawl, m)?)?;
    m.add_function(wrap_pyfunction!(causal_score, m)?)?;
    m.add_function(wrap_pyfunction!(precision_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(latency_percentiles, m)?)?;
    m.add_function(wrap_pyfunction!(vqa_confusion, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("TOPOLOGIES", shipped::TOPOLOGIES.map(|(n, _)| n).to_vec())?;
    m.add("FLOWS", shipped::FLOWS.map(|(n, _)| n).to_vec())?;
    Ok(())
}
