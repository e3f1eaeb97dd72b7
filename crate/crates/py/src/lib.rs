//! Python bindings: scenarios, runs, ledgers, keys and the stand-alone
//! experiments. Structured results cross the boundary as JSON and come
//! back as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::Serialize;

use gridtrade::crypto::{self, KeyPair as CoreKeyPair, Signature};
use gridtrade::ledger::Ledger as CoreLedger;
use gridtrade::sim::artifacts::RunArtifacts;
use gridtrade::sim::config::ScenarioConfig;
use gridtrade::sim::experiments::{self, LinkSetting};
use gridtrade::types::{Address, ProsumerId, PublicKey, Timestep};

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(module = "gridtrade_py")]
struct Scenario {
    cfg: ScenarioConfig,
}

#[pymethods]
impl Scenario {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let cfg = ScenarioConfig::from_toml(text).map_err(value_err)?;
        cfg.validate().map_err(value_err)?;
        Ok(Scenario { cfg })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let cfg = ScenarioConfig::load(&path).map_err(value_err)?;
        cfg.validate().map_err(value_err)?;
        Ok(Scenario { cfg })
    }

    /// Random 20-prosumer scenario with every adversarial policy.
    #[staticmethod]
    fn random(seed: u64, ticks: u64) -> Self {
        Scenario { cfg: experiments::random_scenario(seed, ticks) }
    }

    /// One seller and one buyer.
    #[staticmethod]
    fn two_party() -> Self {
        Scenario { cfg: ScenarioConfig::from_toml(experiments::TWO_PARTY).expect("built-in scenario") }
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    #[getter]
    fn ticks(&self) -> u64 {
        self.cfg.ticks
    }

    fn to_toml(&self) -> String {
        self.cfg.to_toml()
    }

    fn run(&self, py: Python<'_>) -> Run {
        let cfg = self.cfg.clone();
        Run { art: py.detach(|| gridtrade::sim::run(cfg)) }
    }

    fn __repr__(&self) -> String {
        format!("Scenario(seed={}, ticks={}, prosumers={})", self.cfg.seed, self.cfg.ticks, self.cfg.prosumers.len())
    }
}

#[pyclass(module = "gridtrade_py")]
struct Run {
    art: RunArtifacts,
}

#[pymethods]
impl Run {
    #[staticmethod]
    fn read(dir: PathBuf) -> PyResult<Self> {
        RunArtifacts::read(&dir).map(|art| Run { art }).map_err(value_err)
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        self.art.write(&dir).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.art.summary)
    }

    /// Invariant report: named checks, privacy statistics, meter results.
    fn check<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &gridtrade::sim::check::check(&self.art))
    }

    #[pyo3(signature = (prosumer=None))]
    fn bills<'py>(&self, py: Python<'py>, prosumer: Option<u32>) -> PyResult<Bound<'py, PyAny>> {
        let lines: Vec<_> =
            self.art.bills.iter().filter(|b| prosumer.is_none_or(|p| b.prosumer == ProsumerId(p))).collect();
        to_py(py, &lines)
    }

    fn trades<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.art.private.trades)
    }

    fn reconcile<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &experiments::reconcile(&self.art))
    }

    fn transcript(&self) -> String {
        experiments::transcript(&self.art)
    }

    fn ledger(&self) -> Ledger {
        Ledger { inner: self.art.ledger.clone() }
    }
}

#[pyclass(module = "gridtrade_py")]
struct Ledger {
    inner: CoreLedger,
}

#[pymethods]
impl Ledger {
    /// Replays a snapshot, re-validating every entry.
    #[staticmethod]
    fn replay(data: &[u8]) -> PyResult<Self> {
        CoreLedger::replay(data).map(|inner| Ledger { inner }).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        CoreLedger::load(&path).map(|inner| Ledger { inner }).map_err(value_err)
    }

    fn snapshot<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.snapshot())
    }

    fn state_hash(&self) -> String {
        hex::encode(self.inner.state_hash())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn entries<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.entries())
    }

    /// One line per entry, as printed by `gridtrade inspect`.
    fn listing(&self) -> String {
        experiments::ledger_listing(&self.inner)
    }

    /// Unspent outputs as (kind, asset, address) with the address in hex.
    fn unspent(&self) -> Vec<(String, String, String)> {
        self.inner
            .unspent()
            .into_iter()
            .map(|(r, rec)| (r.kind.code().to_string(), experiments::asset_text(&rec.asset), rec.address.to_hex()))
            .collect()
    }

    /// (consumption, production) prices in effect at `t`.
    fn active_prices(&self, t: u64) -> (String, String) {
        let p = self.inner.active_prices(Timestep(t));
        (p.consumption.to_string(), p.production.to_string())
    }
}

#[pyclass(module = "gridtrade_py")]
struct KeyPair {
    inner: CoreKeyPair,
}

#[pymethods]
impl KeyPair {
    #[new]
    fn new(seed: &[u8]) -> PyResult<Self> {
        let seed: [u8; 32] = seed.try_into().map_err(|_| PyValueError::new_err("seed must be 32 bytes"))?;
        Ok(KeyPair { inner: CoreKeyPair::from_seed(seed) })
    }

    fn address(&self) -> String {
        self.inner.address().to_hex()
    }

    fn public_key<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.public().0)
    }

    /// 96 bytes: the public key followed by the signature.
    fn sign<'py>(&self, py: Python<'py>, message: &[u8]) -> Bound<'py, PyBytes> {
        let sig = self.inner.sign(message);
        let mut out = sig.key.0.to_vec();
        out.extend_from_slice(&sig.bytes);
        PyBytes::new(py, &out)
    }
}

/// Checks a 96-byte signature from `KeyPair.sign` against a hex address.
#[pyfunction]
fn verify(address: &str, message: &[u8], signature: &[u8]) -> PyResult<bool> {
    let address = Address::from_hex(address).map_err(value_err)?;
    if signature.len() != 96 {
        return Ok(false);
    }
    let key = PublicKey(signature[..32].try_into().expect("32 bytes"));
    let sig = Signature { key, bytes: signature[32..].to_vec() };
    Ok(crypto::verify(&address, message, &sig))
}

/// Loads and checks a run directory.
#[pyfunction]
fn check_dir<'py>(py: Python<'py>, dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let report = gridtrade::sim::check::check_dir(&dir).map_err(value_err)?;
    to_py(py, &report)
}

#[pyfunction]
#[pyo3(signature = (setting="equal", k=8, rounds=200, seed=1))]
fn linkability<'py>(py: Python<'py>, setting: &str, k: usize, rounds: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let setting = match setting {
        "equal" => LinkSetting::EqualDenominations,
        "unequal" => LinkSetting::UnequalDenominations,
        "disabled" => LinkSetting::Disabled,
        other => return Err(PyValueError::new_err(format!("unknown setting {other:?}"))),
    };
    let stats = py.detach(|| experiments::linkability(setting, k, rounds, seed));
    to_py(py, &stats)
}

#[pyfunction]
#[pyo3(signature = (runs=100, replicas=4, seed=1))]
fn double_spend_races<'py>(py: Python<'py>, runs: usize, replicas: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let stats = py.detach(|| experiments::double_spend_races(runs, replicas, seed));
    to_py(py, &stats)
}

#[pyfunction]
#[pyo3(signature = (discipline, seeds=50, seed=1))]
fn footprint_classifier<'py>(py: Python<'py>, discipline: bool, seeds: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let stats = py.detach(|| experiments::footprint_classifier(seeds, discipline, seed));
    to_py(py, &stats)
}

#[pyfunction]
#[pyo3(signature = (rt_time=15, horizon=30, seed=1))]
fn price_activation<'py>(py: Python<'py>, rt_time: u64, horizon: u64, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &experiments::price_activation(rt_time, horizon, seed))
}

#[pymodule]
fn gridtrade_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scenario>()?;
    m.add_class::<Run>()?;
    m.add_class::<Ledger>()?;
    m.add_class::<KeyPair>()?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(check_dir, m)?)?;
    m.add_function(wrap_pyfunction!(linkability, m)?)?;
    m.add_function(wrap_pyfunction!(double_spend_races, m)?)?;
    m.add_function(wrap_pyfunction!(footprint_classifier, m)?)?;
    m.add_function(wrap_pyfunction!(price_activation, m)?)?;
    Ok(())
}
