//! Scenario configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::{stages_needed, Bundle, Denominations, Policy};
use crate::board::ProofMode;
use crate::dso::ThresholdStrategy;
use crate::fixed::{Amount, Power, Price};
use crate::mixing::DenominationPolicy;
use crate::transactions::Prices;

/// A configuration problem at a dotted field path such as
/// `prosumers[3].max_epa`.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.path.is_empty() {
            f.write_str(&self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl ConfigError {
    fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError { path: path.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub ticks: u64,
    #[serde(default = "default_tick_seconds")]
    pub tick_seconds: u32,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default = "default_latency")]
    pub latency: u64,
    pub epoch_length: u64,
    pub prices: Prices,
    pub denominations: Denominations,
    pub bundle: Bundle,
    #[serde(default)]
    pub mixing: MixingConfig,
    #[serde(default)]
    pub board: BoardConfig,
    #[serde(default)]
    pub discipline: DisciplineConfig,
    #[serde(default)]
    pub measurements: MeasurementConfig,
    #[serde(default)]
    pub agents: AgentConfig,
    #[serde(default)]
    pub dso: DsoConfig,
    #[serde(default)]
    pub regulations: Vec<RegulationConfig>,
    #[serde(default)]
    pub prosumers: Vec<ProsumerConfig>,
}

fn default_tick_seconds() -> u32 {
    900
}

fn default_replicas() -> usize {
    1
}

fn default_latency() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixingConfig {
    pub enabled: bool,
    pub k_min: usize,
    pub rounds: u32,
    pub deadline_ticks: u64,
    pub policy: DenominationPolicy,
}

impl Default for MixingConfig {
    fn default() -> Self {
        MixingConfig { enabled: true, k_min: 8, rounds: 1, deadline_ticks: 2, policy: DenominationPolicy::Exact }
    }
}

impl MixingConfig {
    pub fn effective_rounds(&self) -> u32 {
        if self.enabled {
            self.rounds
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoardConfig {
    pub proof_mode: ProofMode,
    pub challenge_expiry: u64,
}

impl Default for BoardConfig {
    fn default() -> Self {
        BoardConfig { proof_mode: ProofMode::Signature, challenge_expiry: crate::board::DEFAULT_CHALLENGE_EXPIRY }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisciplineConfig {
    pub enabled: bool,
}

impl Default for DisciplineConfig {
    fn default() -> Self {
        DisciplineConfig { enabled: true }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasurementConfig {
    /// Uniform noise bound added to each measured net power, in mW.
    pub noise_mw: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    /// Ticks a buyer waits for an answer before trying another ask.
    pub session_timeout: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig { session_timeout: 6 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum StrategyConfig {
    #[default]
    Fixed,
    Threshold {
        cap: Power,
        step: Price,
        ceiling: Price,
    },
}

impl StrategyConfig {
    pub fn threshold(&self) -> Option<ThresholdStrategy> {
        match *self {
            StrategyConfig::Fixed => None,
            StrategyConfig::Threshold { cap, step, ceiling } => Some(ThresholdStrategy { cap, step, ceiling }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsoConfig {
    pub strategy: StrategyConfig,
    /// Ticks ahead covered by each forecast.
    pub forecast_horizon: u64,
}

impl Default for DsoConfig {
    fn default() -> Self {
        DsoConfig { strategy: StrategyConfig::Fixed, forecast_horizon: 40 }
    }
}

/// A price/ban update recorded so that it takes effect after `time`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegulationConfig {
    pub time: u64,
    pub consumption: Price,
    pub production: Price,
    #[serde(default)]
    pub ban: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProsumerConfig {
    pub policy: Policy,
    pub price: Price,
    #[serde(default = "default_units")]
    pub units: u32,
    pub max_epa: Power,
    pub max_eca: Power,
    pub credit_limit: Amount,
    /// Number of identical prosumers this entry stands for.
    #[serde(default = "default_count")]
    pub count: u32,
}

fn default_units() -> u32 {
    1
}

fn default_count() -> u32 {
    1
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::new(text);
        let cfg: ScenarioConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let message = e.into_inner().message().to_string();
            ConfigError::new(if path == "." { String::new() } else { path }, message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("", e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// One entry per prosumer, with `count` expanded.
    pub fn roster(&self) -> Vec<ProsumerConfig> {
        self.prosumers.iter().flat_map(|p| std::iter::repeat_n(p.clone(), p.count as usize)).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |p: &str, m: String| Err(ConfigError::new(p, m));
        if self.ticks == 0 {
            return err("ticks", "must be positive".into());
        }
        if self.replicas == 0 {
            return err("replicas", "must be at least 1".into());
        }
        if self.latency == 0 {
            return err("latency", "must be at least 1".into());
        }
        if self.tick_seconds == 0 {
            return err("tick_seconds", "must be positive".into());
        }
        let rounds = self.mixing.effective_rounds();
        let need = (stages_needed(rounds) + 1) * self.latency;
        if self.epoch_length <= need {
            return err("epoch_length", format!("must exceed {need} ticks for {rounds} mixing round(s) at latency {}", self.latency));
        }
        if self.mixing.enabled {
            if self.mixing.k_min == 0 {
                return err("mixing.k_min", "must be at least 1".into());
            }
            if self.mixing.deadline_ticks < 2 * self.latency {
                return err("mixing.deadline_ticks", format!("must be at least {} (two latencies)", 2 * self.latency));
            }
        }
        for (name, zero) in [
            ("denominations.epa", self.denominations.epa.is_zero()),
            ("denominations.eca", self.denominations.eca.is_zero()),
            ("denominations.fa", self.denominations.fa.is_zero()),
        ] {
            if zero {
                return err(name, "must be positive".into());
            }
        }
        if self.agents.session_timeout < 2 * self.latency {
            return err("agents.session_timeout", format!("must be at least {} (a round trip)", 2 * self.latency));
        }
        let b = self.bundle;
        let roster_len = self.roster().len() as u64;
        if roster_len > u32::MAX as u64 {
            return err("prosumers", "too many prosumers".into());
        }
        for (i, p) in self.prosumers.iter().enumerate() {
            let at = |f: &str| format!("prosumers[{i}].{f}");
            let epa = self.denominations.epa.0 * b.epa_units as u64;
            let eca = self.denominations.eca.0 * b.eca_units as u64;
            let fa = self.denominations.fa.0 * b.fa_units as u64;
            if p.max_epa.0 < epa {
                return err(&at("max_epa"), format!("below the bundle's EPA ({})", Power(epa)));
            }
            if p.max_eca.0 < eca {
                return err(&at("max_eca"), format!("below the bundle's ECA ({})", Power(eca)));
            }
            if p.credit_limit.0 < fa {
                return err(&at("credit_limit"), format!("below the bundle's FA ({})", Amount(fa)));
            }
            if p.policy.sells() && p.units > b.epa_units {
                return err(&at("units"), format!("exceeds bundle.epa_units ({})", b.epa_units));
            }
            if p.policy.buys() && p.units > b.eca_units {
                return err(&at("units"), format!("exceeds bundle.eca_units ({})", b.eca_units));
            }
        }
        for (i, r) in self.regulations.iter().enumerate() {
            if r.time < self.latency {
                return err(&format!("regulations[{i}].time"), format!("must be at least latency ({})", self.latency));
            }
            for (j, id) in r.ban.iter().enumerate() {
                if *id as u64 >= roster_len {
                    return err(&format!("regulations[{i}].ban[{j}]"), format!("no meter {id}"));
                }
            }
        }
        Ok(())
    }
}
