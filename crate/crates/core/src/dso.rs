//! Distribution system operator: signs regulatory transactions and
//! forecasts load from the ledger and the order board.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::board::{BidBoard, OrderFilter, Side};
use crate::crypto::KeyPair;
use crate::fixed::{NetPower, Power, Price};
use crate::ledger::Ledger;
use crate::profile::StepFunction;
use crate::transactions::{MeterAuthorization, Prices, RegulatoryTx, Transaction, ValidationVerdict};
use crate::types::{Address, Asset, MeterId, PublicKey, Timestep};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegulationError {
    #[error("STALE_TIMESTEP(effective={effective}, now={now})")]
    StaleTimestep { effective: Timestep, now: Timestep },
    #[error("rejected: {0}")]
    Rejected(ValidationVerdict),
}

#[derive(Debug, Clone)]
pub struct Dso {
    key: KeyPair,
}

impl Dso {
    pub fn new(key: KeyPair) -> Self {
        Dso { key }
    }

    pub fn public_key(&self) -> PublicKey {
        self.key.public()
    }

    /// Signs a regulatory transaction effective for timesteps after
    /// `effective`.
    pub fn issue_regulation(
        &self,
        authorize: Vec<(MeterId, PublicKey)>,
        ban: Vec<MeterId>,
        prices: Prices,
        effective: Timestep,
        now: Timestep,
    ) -> Result<RegulatoryTx, RegulationError> {
        if effective < now {
            return Err(RegulationError::StaleTimestep { effective, now });
        }
        let authorize = authorize.into_iter().map(|(id, pubkey)| MeterAuthorization { id, pubkey }).collect();
        Ok(RegulatoryTx::signed(authorize, ban, prices, effective, &self.key))
    }

    /// Issues and appends directly to a single ledger.
    pub fn regulate(
        &self,
        ledger: &mut Ledger,
        authorize: Vec<(MeterId, PublicKey)>,
        ban: Vec<MeterId>,
        prices: Prices,
        effective: Timestep,
        now: Timestep,
    ) -> Result<RegulatoryTx, RegulationError> {
        let rt = self.issue_regulation(authorize, ban, prices, effective, now)?;
        ledger.append(Transaction::Rt(rt.clone()), now).map_err(RegulationError::Rejected)?;
        Ok(rt)
    }
}

/// Per-timestep load figures over an inclusive horizon.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadForecast {
    pub start: Timestep,
    pub end: Timestep,
    /// Unspent ECA minus unspent EPA coverage outside meter deposit addresses.
    pub committed: Vec<NetPower>,
    /// Coverage of open asks.
    pub offered_supply: Vec<Power>,
    /// Coverage of open bids.
    pub offered_demand: Vec<Power>,
}

impl LoadForecast {
    pub fn committed_at(&self, t: Timestep) -> Option<NetPower> {
        self.index(t).map(|i| self.committed[i])
    }

    fn index(&self, t: Timestep) -> Option<usize> {
        (self.start <= t && t <= self.end).then(|| (t.0 - self.start.0) as usize)
    }

    pub fn peak_committed(&self) -> NetPower {
        self.committed.iter().copied().max().unwrap_or(NetPower::ZERO)
    }
}

fn sample(f: &StepFunction, start: Timestep, end: Timestep) -> Vec<i128> {
    (start.0..=end.0).map(|t| f.value_at(Timestep(t))).collect()
}

/// Forecast over `[start, end]` from unspent outputs and open orders.
/// Outputs at `retired` addresses (meter deposit addresses) are skipped.
pub fn forecast_load(
    ledger: &Ledger,
    board: &BidBoard,
    start: Timestep,
    end: Timestep,
    retired: &HashSet<Address>,
) -> LoadForecast {
    let mut committed = StepFunction::new();
    for (_, rec) in ledger.unspent() {
        if retired.contains(&rec.address) {
            continue;
        }
        match rec.asset {
            Asset::Eca(e) => committed.add_asset(&e, 1),
            Asset::Epa(e) => committed.add_asset(&e, -1),
            Asset::Fa(_) => {}
        }
    }
    let mut supply = StepFunction::new();
    let mut demand = StepFunction::new();
    let filter = OrderFilter { overlap: Some((start, end)), ..OrderFilter::default() };
    for o in board.query(&filter) {
        match o.side {
            Side::Ask => supply.add_asset(&o.energy, 1),
            Side::Bid => demand.add_asset(&o.energy, 1),
        }
    }
    LoadForecast {
        start,
        end,
        committed: sample(&committed, start, end).into_iter().map(|v| NetPower(v as i64)).collect(),
        offered_supply: sample(&supply, start, end).into_iter().map(|v| Power(v as u64)).collect(),
        offered_demand: sample(&demand, start, end).into_iter().map(|v| Power(v as u64)).collect(),
    }
}

/// Turns a forecast into a price update.
pub trait PriceStrategy {
    fn next_prices(&mut self, forecast: &LoadForecast, current: Prices) -> Option<Prices>;
}

/// Never changes prices.
#[derive(Debug, Clone, Copy, Default)]
pub struct FixedPrices;

impl PriceStrategy for FixedPrices {
    fn next_prices(&mut self, _: &LoadForecast, _: Prices) -> Option<Prices> {
        None
    }
}

/// Raises the consumption price by `step` whenever the committed load peak
/// exceeds `cap`, up to `ceiling`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdStrategy {
    pub cap: Power,
    pub step: Price,
    pub ceiling: Price,
}

impl PriceStrategy for ThresholdStrategy {
    fn next_prices(&mut self, forecast: &LoadForecast, current: Prices) -> Option<Prices> {
        if forecast.peak_committed().0 <= self.cap.0 as i64 || current.consumption >= self.ceiling {
            return None;
        }
        let raised = Price((current.consumption.0 + self.step.0).min(self.ceiling.0));
        Some(Prices { consumption: raised, production: current.production })
    }
}
