//! Python bindings. Structured results come back as plain dicts and lists;
//! pages, scenarios and traces travel as the same JSON the CLI reads.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict, PyList};
use serde::Serialize;

use cgn_core::gatherwire::{self, EndPayload, FrameDecoder, GatherFrame, RequestPayload};
use cgn_core::mapping::{self, MappingTable, ProxyEndpoint};
use cgn_core::model::{Domain, GeParams, LossModel, VantageId};
use cgn_core::netem::LossStream;
use cgn_core::pagesim::{self, PageGenConfig, PageSpec, Scenario, SweepConfig};
use cgn_core::perfmodel::{self, CostInputs, IdealModels, LatencyDecomposition};
use cgn_core::siteselect::{self, HeuristicConfig, Objective};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Round-trips a serializable value through Python's json module.
fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn named_preset(name: &str) -> PyResult<perfmodel::CoefficientPreset> {
    perfmodel::preset(name).ok_or_else(|| err(format!("unknown preset {name:?}")))
}

#[pyfunction]
#[pyo3(signature = (pages_per_month=3000.0, avg_page_bytes=2e6, service_time_s=5.2, price_per_hour=0.431, price_per_gb=0.087, concurrency=1))]
fn cost_per_user_month<'py>(
    py: Python<'py>,
    pages_per_month: f64,
    avg_page_bytes: f64,
    service_time_s: f64,
    price_per_hour: f64,
    price_per_gb: f64,
    concurrency: u32,
) -> PyResult<Bound<'py, PyAny>> {
    let c = perfmodel::cost_per_user_month(&CostInputs {
        pages_per_month,
        avg_page_bytes,
        service_time_s,
        price_per_hour,
        price_per_gb,
        concurrency,
    })
    .map_err(err)?;
    to_py(py, &c)
}

/// Returns `(slope, intercept, r_squared)`.
#[pyfunction]
fn fit_linear(points: Vec<(f64, f64)>) -> PyResult<(f64, f64, f64)> {
    let f = perfmodel::fit_linear(&points).map_err(err)?;
    Ok((f.slope, f.intercept, perfmodel::r_squared(&f, &points)))
}

/// RTT (seconds) where the gathering line of `preset` crosses the default line.
#[pyfunction]
#[pyo3(signature = (preset="final"))]
fn crossover_rtt(preset: &str) -> PyResult<f64> {
    let p = named_preset(preset)?;
    match perfmodel::crossover_rtt(&p.default, &p.fetch).map_err(err)? {
        perfmodel::Crossover::At(x) => Ok(x),
        perfmodel::Crossover::NonePositive(x) => Err(err(format!("lines meet at negative rtt {x}"))),
    }
}

#[pyfunction]
#[pyo3(signature = (rtt_lm_s, delta_s, preset="final"))]
fn normalized_comparison<'py>(
    py: Python<'py>,
    rtt_lm_s: f64,
    delta_s: f64,
    preset: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let d = LatencyDecomposition::new(rtt_lm_s, delta_s).map_err(err)?;
    let c = perfmodel::normalized_comparison(&d, &named_preset(preset)?, &IdealModels::default());
    to_py(py, &c)
}

#[pyfunction]
fn ge_stationary_loss(p: f64, r: f64, one_minus_h: f64, one_minus_k: f64) -> PyResult<f64> {
    cgn_core::model::ge_stationary_loss(&GeParams {
        p,
        r,
        one_minus_h,
        one_minus_k,
    })
    .map_err(err)
}

/// Fraction of `steps` segments lost by a seeded Gilbert-Elliott stream.
#[pyfunction]
fn ge_empirical_loss(p: f64, r: f64, one_minus_h: f64, one_minus_k: f64, steps: u64, seed: u64) -> PyResult<f64> {
    let g = GeParams {
        p,
        r,
        one_minus_h,
        one_minus_k,
    };
    let mut s = LossStream::new(LossModel::GilbertElliott(g), seed).map_err(err)?;
    if steps == 0 {
        return Err(err("steps must be >= 1"));
    }
    Ok(s.count_losses(steps) as f64 / steps as f64)
}

/// Page JSON.
#[pyfunction]
#[pyo3(signature = (seed, n_resources=50, total_bytes=2_000_000, depth=3, ad_fraction=0.05))]
fn generate_page(seed: u64, n_resources: usize, total_bytes: u64, depth: usize, ad_fraction: f64) -> PyResult<String> {
    let p = pagesim::generate_page(&PageGenConfig {
        seed,
        n_resources,
        total_bytes,
        depth,
        ad_fraction,
    })
    .map_err(err)?;
    Ok(p.to_json())
}

/// Trace as a dict: mode, entries, viz85_s, full_load_s.
#[pyfunction]
fn simulate<'py>(py: Python<'py>, page_json: &str, scenario_json: &str) -> PyResult<Bound<'py, PyAny>> {
    let page = PageSpec::from_json(page_json).map_err(err)?;
    let sc: Scenario = serde_json::from_str(scenario_json).map_err(err)?;
    to_py(py, &pagesim::simulate(&page, &sc).map_err(err)?)
}

/// Sweep CSV text.
#[pyfunction]
fn sweep(pages_json: Vec<String>, sweep_json: &str) -> PyResult<String> {
    let pages = pages_json
        .iter()
        .map(|p| PageSpec::from_json(p))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    let cfg: SweepConfig = serde_json::from_str(sweep_json).map_err(err)?;
    let rows = pagesim::sweep(&pages, &cfg).map_err(err)?;
    let mut buf = Vec::new();
    pagesim::write_sweep_csv(&rows, &mut buf).map_err(err)?;
    String::from_utf8(buf).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (url, cwnd_hint_bytes=0, want_compression=false))]
fn encode_request<'py>(
    py: Python<'py>,
    url: String,
    cwnd_hint_bytes: u64,
    want_compression: bool,
) -> PyResult<Bound<'py, PyBytes>> {
    let f = GatherFrame::Request(RequestPayload {
        url,
        cwnd_hint_bytes,
        want_compression,
    });
    Ok(PyBytes::new(py, &gatherwire::encode(&f).map_err(err)?))
}

#[pyfunction]
#[pyo3(signature = (resource_count=0, total_body_bytes=0, gather_ms=0, truncated=false, cwnd_hint_bytes=0))]
fn encode_end<'py>(
    py: Python<'py>,
    resource_count: u64,
    total_body_bytes: u64,
    gather_ms: u64,
    truncated: bool,
    cwnd_hint_bytes: u64,
) -> PyResult<Bound<'py, PyBytes>> {
    let f = GatherFrame::End(EndPayload {
        resource_count,
        total_body_bytes,
        gather_ms,
        truncated,
        cwnd_hint_bytes,
    });
    Ok(PyBytes::new(py, &gatherwire::encode(&f).map_err(err)?))
}

/// Decodes a byte stream into a list of `(type, payload)` pairs. Payloads
/// are dicts; RESOURCE header blocks and bodies are bytes.
#[pyfunction]
fn decode_frames<'py>(py: Python<'py>, data: &[u8]) -> PyResult<Bound<'py, PyList>> {
    let mut dec = FrameDecoder::new();
    dec.feed(data);
    let out = PyList::empty(py);
    while let Some(f) = dec.next_frame().map_err(err)? {
        let (name, payload) = match f {
            GatherFrame::Request(p) => ("request", to_py(py, &p)?),
            GatherFrame::Manifest(p) => ("manifest", to_py(py, &p)?),
            GatherFrame::End(p) => ("end", to_py(py, &p)?),
            GatherFrame::Error(p) => ("error", to_py(py, &p)?),
            GatherFrame::Resource(r) => {
                let d = PyDict::new(py);
                d.set_item("url", r.url)?;
                d.set_item("status", r.status)?;
                d.set_item("seq", r.seq)?;
                d.set_item("last", r.last)?;
                d.set_item("fetch_ms", r.fetch_ms)?;
                d.set_item("header_block", PyBytes::new(py, &r.header_block))?;
                d.set_item("body", PyBytes::new(py, &r.body))?;
                ("resource", d.into_any())
            }
        };
        out.append((name, payload))?;
    }
    dec.finish().map_err(err)?;
    Ok(out)
}

/// Domain-to-proxy mapping file.
#[pyclass(name = "Mapping", module = "cgn")]
struct PyMapping(MappingTable);

#[pymethods]
impl PyMapping {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        MappingTable::parse(text).map(PyMapping).map_err(err)
    }

    /// Builds from RTT CSV text and `(proxy_id, "host:port")` pairs.
    #[staticmethod]
    fn build(rtt_csv: &str, proxies: Vec<(String, String)>, built_at: u64) -> PyResult<Self> {
        let table = cgn_core::census::read_rtt_csv(rtt_csv.as_bytes(), "rtt_csv").map_err(err)?;
        let endpoints = proxies
            .iter()
            .map(|(id, addr)| ProxyEndpoint::new(VantageId::new(id).map_err(err)?, addr).map_err(err))
            .collect::<PyResult<Vec<_>>>()?;
        mapping::build(&table, endpoints, built_at).map(PyMapping).map_err(err)
    }

    fn serialize(&self) -> String {
        self.0.serialize()
    }

    /// `(address, fresh)` for a mapped domain, None on a miss.
    fn lookup(&self, domain: &str, max_age_s: u64, now: u64) -> PyResult<Option<(String, bool)>> {
        let d = Domain::new(domain).map_err(err)?;
        Ok(match self.0.lookup_at(&d, max_age_s, now) {
            mapping::Lookup::Fresh(e) => Some((e.address(), true)),
            mapping::Lookup::Stale(e) => Some((e.address(), false)),
            mapping::Lookup::Miss => None,
        })
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Chooses `budget` locations from a `domain,loc1,...` matrix CSV.
#[pyfunction]
#[pyo3(signature = (matrix_csv, budget, objective="median", seed=0, pool_size=20, keep_size=15, rounds=8, exact=false))]
#[allow(clippy::too_many_arguments)]
fn select<'py>(
    py: Python<'py>,
    matrix_csv: &str,
    budget: usize,
    objective: &str,
    seed: u64,
    pool_size: usize,
    keep_size: usize,
    rounds: usize,
    exact: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let objective: Objective = objective.parse().map_err(err)?;
    let problem = siteselect::read_matrix_csv(matrix_csv.as_bytes(), budget, objective).map_err(err)?;
    let r = if exact {
        siteselect::select_brute_force(&problem, siteselect::DEFAULT_SUBSET_CAP)
    } else {
        siteselect::select_heuristic(
            &problem,
            &HeuristicConfig {
                pool_size,
                keep_size,
                rounds,
                seed,
            },
        )
    }
    .map_err(err)?;
    to_py(
        py,
        &siteselect::SelectionReport {
            chosen: r.chosen,
            objective,
            value_ms: r.objective_value,
            budget,
            seed,
        },
    )
}

#[pymodule]
fn cgn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(cost_per_user_month, m)?)?;
    m.add_function(wrap_pyfunction!(fit_linear, m)?)?;
    m.add_function(wrap_pyfunction!(crossover_rtt, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_comparison, m)?)?;
    m.add_function(wrap_pyfunction!(ge_stationary_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ge_empirical_loss, m)?)?;
    m.add_function(wrap_pyfunction!(generate_page, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(encode_request, m)?)?;
    m.add_function(wrap_pyfunction!(encode_end, m)?)?;
    m.add_function(wrap_pyfunction!(decode_frames, m)?)?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    m.add_class::<PyMapping>()?;
    Ok(())
}
