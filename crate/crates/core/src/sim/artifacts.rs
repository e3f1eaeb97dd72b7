//! Files a run leaves behind, and loading them back for offline checks.
//!
//! | file | content |
//! |---|---|
//! | `config.toml` | the scenario, normalized |
//! | `ledger.bin` | ledger snapshot |
//! | `measurements.jsonl` | one measured net power per prosumer and tick |
//! | `bills.jsonl` | meter-computed bill lines |
//! | `forecasts.jsonl` | DSO load forecast per tick |
//! | `bus_trace.jsonl` | submissions, outcomes, message metadata, service events |
//! | `orders.json` | order board contents at the end of the run |
//! | `private.json` | ground truth for checkers (address ownership, trades) |
//! | `summary.json` | ledger hash and run totals |

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::agents::{AgentPrivate, EpochReport, Policy};
use crate::board::Order;
use crate::dso::LoadForecast;
use crate::fixed::NetPower;
use crate::ledger::{Ledger, LoadError};
use crate::meter::{BillLine, MeterLimits};
use crate::sim::bus::TraceEvent;
use crate::sim::config::{ConfigError, ScenarioConfig};
use crate::transactions::Prices;
use crate::types::{Address, EnergyAsset, MeterId, ProsumerId, Timestep, TxId};

pub const CONFIG: &str = "config.toml";
pub const LEDGER: &str = "ledger.bin";
pub const MEASUREMENTS: &str = "measurements.jsonl";
pub const BILLS: &str = "bills.jsonl";
pub const FORECASTS: &str = "forecasts.jsonl";
pub const TRACE: &str = "bus_trace.jsonl";
pub const ORDERS: &str = "orders.json";
pub const PRIVATE: &str = "private.json";
pub const SUMMARY: &str = "summary.json";
pub const REPORT: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub prosumer: ProsumerId,
    pub meter: MeterId,
    pub t: Timestep,
    pub net: NetPower,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub tick: Timestep,
    pub prices: Prices,
    pub forecast: LoadForecast,
}

/// A recorded market settlement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TradeRecord {
    pub tx: TxId,
    pub recorded_at: Timestep,
    pub seller: ProsumerId,
    pub buyer: ProsumerId,
    pub energy: EnergyAsset,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProsumerTruth {
    pub prosumer: ProsumerId,
    pub meter: MeterId,
    pub policy: Policy,
    pub limits: MeterLimits,
    pub agent: AgentPrivate,
    pub deposit_addresses: Vec<Address>,
    pub reports: Vec<EpochReport>,
    pub obligations_clear: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivateTruth {
    pub prosumers: Vec<ProsumerTruth>,
    pub trades: Vec<TradeRecord>,
}

impl PrivateTruth {
    pub fn owner_of(&self, addr: &Address) -> Option<ProsumerId> {
        self.prosumers
            .iter()
            .find(|p| p.agent.addresses.contains(addr) || p.agent.escrow.contains(addr))
            .map(|p| p.prosumer)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub ticks: u64,
    pub ledger_hash: String,
    pub entries: usize,
    pub replicas: usize,
    pub replicas_agree: bool,
    pub divergence: Option<String>,
    pub epochs: u64,
    pub trades: usize,
    pub mix_rounds_settled: usize,
    pub mix_rounds_refunded: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{0}")]
    Ledger(#[from] LoadError),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Io { path: path.to_path_buf(), source }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), ArtifactError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for item in items {
        serde_json::to_writer(&mut w, item).expect("serializable");
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, ArtifactError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line)
            .map_err(|e| ArtifactError::Parse { path: path.to_path_buf(), line: i + 1, message: e.to_string() })?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), ArtifactError> {
    let text = serde_json::to_string_pretty(v).expect("serializable");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, ArtifactError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| ArtifactError::Parse { path: path.to_path_buf(), line: e.line(), message: e.to_string() })
}

/// Everything a run produced, in memory.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: ScenarioConfig,
    pub ledger: Ledger,
    pub measurements: Vec<MeasurementRecord>,
    pub bills: Vec<BillLine>,
    pub forecasts: Vec<ForecastRecord>,
    pub trace: Vec<TraceEvent>,
    pub orders: Vec<Order>,
    pub private: PrivateTruth,
    pub summary: Summary,
}

impl RunArtifacts {
    pub fn write(&self, dir: &Path) -> Result<(), ArtifactError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let p = |f: &str| dir.join(f);
        std::fs::write(p(CONFIG), self.config.to_toml()).map_err(io_err(&p(CONFIG)))?;
        self.ledger.save(&p(LEDGER)).map_err(io_err(&p(LEDGER)))?;
        write_jsonl(&p(MEASUREMENTS), &self.measurements)?;
        write_jsonl(&p(BILLS), &self.bills)?;
        write_jsonl(&p(FORECASTS), &self.forecasts)?;
        write_jsonl(&p(TRACE), &self.trace)?;
        write_json(&p(ORDERS), &self.orders)?;
        write_json(&p(PRIVATE), &self.private)?;
        write_json(&p(SUMMARY), &self.summary)
    }

    /// Loads a run directory. The ledger is replayed, so a tampered
    /// snapshot fails here with `REPLAY_INVALID`.
    pub fn read(dir: &Path) -> Result<Self, ArtifactError> {
        let p = |f: &str| dir.join(f);
        Ok(RunArtifacts {
            config: ScenarioConfig::load(&p(CONFIG))?,
            ledger: Ledger::load(&p(LEDGER))?,
            measurements: read_jsonl(&p(MEASUREMENTS))?,
            bills: read_jsonl(&p(BILLS))?,
            forecasts: read_jsonl(&p(FORECASTS))?,
            trace: read_jsonl(&p(TRACE))?,
            orders: read_json(&p(ORDERS))?,
            private: read_json(&p(PRIVATE))?,
            summary: read_json(&p(SUMMARY))?,
        })
    }
}
