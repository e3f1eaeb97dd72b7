//! Price policy and meter registry as folds over regulatory transactions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{LedgerView, RegulatoryTx};
use crate::fixed::Price;
use crate::types::{MeterId, PublicKey, Timestep};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prices {
    /// Price at which the DSO sells energy.
    pub consumption: Price,
    /// Price at which the DSO buys energy.
    pub production: Price,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeterStatus {
    Authorized(PublicKey),
    Banned,
}

pub type Registry = BTreeMap<MeterId, MeterStatus>;

/// Prices of the last recorded regulatory transaction whose `time` is
/// strictly less than `t`; genesis prices if there is none.
pub fn active_prices<V: LedgerView + ?Sized>(view: &V, t: Timestep) -> Prices {
    view.regulatory()
        .iter()
        .rev()
        .find(|rt| rt.time < t)
        .map(RegulatoryTx::prices)
        .unwrap_or(view.genesis().initial_prices)
}

/// Registry in effect at `t`: authorizations and bans of every regulatory
/// transaction with `time < t`, applied in ledger order. Within one
/// transaction authorizations are applied before bans.
pub fn active_registry<V: LedgerView + ?Sized>(view: &V, t: Timestep) -> Registry {
    let mut reg = Registry::new();
    for rt in view.regulatory().iter().filter(|rt| rt.time < t) {
        apply_regulation(&mut reg, rt);
    }
    reg
}

pub fn apply_regulation(reg: &mut Registry, rt: &RegulatoryTx) {
    for a in &rt.authorize {
        reg.insert(a.id, MeterStatus::Authorized(a.pubkey));
    }
    for id in &rt.ban {
        reg.insert(*id, MeterStatus::Banned);
    }
}
