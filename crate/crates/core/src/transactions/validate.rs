use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::policy::{active_registry, MeterStatus};
use super::{
    AssetInput, EnergyFinancialTx, Genesis, OutputRef, Outputs, RegulatoryTx, SmartMeterTx,
    Transaction,
};
use crate::profile::StepFunction;
use crate::types::{Address, Asset, AssetKind, MeterId, Timestep, TxId};

/// An output as recorded on the ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub asset: Asset,
    pub address: Address,
}

/// Read access to a consistent ledger prefix.
pub trait LedgerView {
    fn genesis(&self) -> &Genesis;

    /// Any output ever created, spent or not.
    fn output(&self, r: &OutputRef) -> Option<&OutputRecord>;

    fn is_spent(&self, r: &OutputRef) -> bool;

    /// Regulatory transactions in ledger order.
    fn regulatory(&self) -> &[RegulatoryTx];

    fn meter_status(&self, id: MeterId, t: Timestep) -> Option<MeterStatus> {
        active_registry(self, t).get(&id).copied()
    }
}

/// Coded reasons a transaction is invalid. Codes are stable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Violation {
    DoubleSpend { input: OutputRef },
    BadSignature { input: Option<OutputRef> },
    BalanceMismatch { kind: AssetKind, t: Option<Timestep> },
    UnknownMeter { id: MeterId },
    BannedMeter { id: MeterId },
    StaleTimestep { time: Timestep, now: Timestep },
    UnknownInput { input: OutputRef },
    InvalidAsset { kind: AssetKind, index: u32 },
    EmptyTransaction,
    DuplicateMeterEntry { id: MeterId },
    Duplicate { id: TxId },
    TimeslotRegression { now: Timestep, last: Timestep },
}

impl Violation {
    pub fn code(&self) -> &'static str {
        match self {
            Violation::DoubleSpend { .. } => "DOUBLE_SPEND",
            Violation::BadSignature { .. } => "BAD_SIGNATURE",
            Violation::BalanceMismatch { .. } => "BALANCE_MISMATCH",
            Violation::UnknownMeter { .. } => "UNKNOWN_METER",
            Violation::BannedMeter { .. } => "BANNED_METER",
            Violation::StaleTimestep { .. } => "STALE_TIMESTEP",
            Violation::UnknownInput { .. } => "UNKNOWN_INPUT",
            Violation::InvalidAsset { .. } => "INVALID_ASSET",
            Violation::EmptyTransaction => "EMPTY_TRANSACTION",
            Violation::DuplicateMeterEntry { .. } => "DUPLICATE_METER_ENTRY",
            Violation::Duplicate { .. } => "DUPLICATE",
            Violation::TimeslotRegression { .. } => "TIMESLOT_REGRESSION",
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::DoubleSpend { input } | Violation::UnknownInput { input } => {
                write!(f, "{}({input})", self.code())
            }
            Violation::BadSignature { input: Some(i) } => write!(f, "{}({i})", self.code()),
            Violation::BalanceMismatch { kind, t: Some(t) } => {
                write!(f, "{}({kind}, t={t})", self.code())
            }
            Violation::BalanceMismatch { kind, t: None } => write!(f, "{}({kind})", self.code()),
            Violation::UnknownMeter { id } | Violation::BannedMeter { id } => {
                write!(f, "{}({id})", self.code())
            }
            Violation::StaleTimestep { time, now } => {
                write!(f, "{}(time={time}, now={now})", self.code())
            }
            _ => f.write_str(self.code()),
        }
    }
}

/// Outcome of validation; valid iff no violations were found.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationVerdict {
    pub violations: Vec<Violation>,
}

impl ValidationVerdict {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, code: &str) -> bool {
        self.violations.iter().any(|v| v.code() == code)
    }

    pub fn codes(&self) -> Vec<&'static str> {
        self.violations.iter().map(Violation::code).collect()
    }

    fn push(&mut self, v: Violation) {
        self.violations.push(v);
    }
}

impl std::fmt::Display for ValidationVerdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_valid() {
            return f.write_str("VALID");
        }
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(", "))
    }
}

fn check_outputs(outputs: &Outputs, verdict: &mut ValidationVerdict) {
    for (kind, index, asset, _) in outputs.iter() {
        if asset.check().is_err() {
            verdict.push(Violation::InvalidAsset { kind, index });
        }
    }
}

/// Validates an energy and financial transaction against `view`.
///
/// Checks, without stopping at the first failure: every input resolves to
/// an unspent output of its list's kind, is referenced once, and carries a
/// signature by that output's address over the signing payload; per
/// timestep EPA and ECA coverage of inputs equals that of outputs; FA
/// totals are equal.
pub fn validate_eft<V: LedgerView + ?Sized>(view: &V, tx: &EnergyFinancialTx) -> ValidationVerdict {
    let mut verdict = ValidationVerdict::default();
    if tx.input_count() == 0 && tx.outputs.is_empty() {
        verdict.push(Violation::EmptyTransaction);
        return verdict;
    }
    check_outputs(&tx.outputs, &mut verdict);

    let payload = Transaction::Eft(tx.clone()).signing_payload();
    let mut seen: HashSet<OutputRef> = HashSet::new();
    let lists: [(AssetKind, &Vec<AssetInput>); 3] =
        [(AssetKind::Epa, &tx.epa_in), (AssetKind::Eca, &tx.eca_in), (AssetKind::Fa, &tx.fa_in)];
    let mut resolved: [Vec<Asset>; 3] = Default::default();
    let mut complete = [true; 3];

    for (slot, (kind, inputs)) in lists.iter().enumerate() {
        for input in inputs.iter() {
            let r = input.out;
            let record = if r.kind == *kind { view.output(&r) } else { None };
            let Some(record) = record.filter(|rec| rec.asset.kind() == *kind) else {
                verdict.push(Violation::UnknownInput { input: r });
                complete[slot] = false;
                continue;
            };
            if !seen.insert(r) || view.is_spent(&r) {
                verdict.push(Violation::DoubleSpend { input: r });
            }
            if !input.sig.verify_address(&record.address, &payload) {
                verdict.push(Violation::BadSignature { input: Some(r) });
            }
            resolved[slot].push(record.asset);
        }
    }

    for (slot, kind) in [(0usize, AssetKind::Epa), (1, AssetKind::Eca)] {
        if !complete[slot] {
            continue;
        }
        let mut diff = StepFunction::new();
        for a in &resolved[slot] {
            if let Some(e) = a.energy().filter(|e| e.check().is_ok()) {
                diff.add_asset(e, 1);
            }
        }
        let outs = if kind == AssetKind::Epa { &tx.outputs.epa } else { &tx.outputs.eca };
        for o in outs.iter().filter(|o| o.asset.check().is_ok()) {
            diff.add_asset(&o.asset, -1);
        }
        for seg in diff.nonzero_segments() {
            verdict.push(Violation::BalanceMismatch { kind, t: Some(seg.start) });
        }
    }
    if complete[2] {
        let input_sum: u128 = resolved[2].iter().filter_map(Asset::amount).map(|a| a.0 as u128).sum();
        let output_sum: u128 = tx.outputs.fa.iter().map(|o| o.asset.amount.0 as u128).sum();
        if input_sum != output_sum {
            verdict.push(Violation::BalanceMismatch { kind: AssetKind::Fa, t: None });
        }
    }
    verdict
}

/// Validates a smart-meter transaction recorded at timeslot `at`: the meter
/// must be authorized and not banned in the registry active at `at`, and
/// must have signed with its registered key.
pub fn validate_smt<V: LedgerView + ?Sized>(
    view: &V,
    tx: &SmartMeterTx,
    at: Timestep,
) -> ValidationVerdict {
    let mut verdict = ValidationVerdict::default();
    if tx.outputs.is_empty() {
        verdict.push(Violation::EmptyTransaction);
    }
    check_outputs(&tx.outputs, &mut verdict);
    match view.meter_status(tx.id, at) {
        None => verdict.push(Violation::UnknownMeter { id: tx.id }),
        Some(MeterStatus::Banned) => verdict.push(Violation::BannedMeter { id: tx.id }),
        Some(MeterStatus::Authorized(key)) => {
            let payload = Transaction::Smt(tx.clone()).signing_payload();
            if !tx.sig.verify_key(&key, &payload) {
                verdict.push(Violation::BadSignature { input: None });
            }
        }
    }
    verdict
}

/// Validates a regulatory transaction at `now`: its `time` is not in the
/// past and the DSO signed it.
pub fn validate_rt<V: LedgerView + ?Sized>(
    view: &V,
    tx: &RegulatoryTx,
    now: Timestep,
) -> ValidationVerdict {
    let mut verdict = ValidationVerdict::default();
    if tx.time < now {
        verdict.push(Violation::StaleTimestep { time: tx.time, now });
    }
    let mut ids = HashSet::new();
    for id in tx.authorize.iter().map(|a| a.id) {
        if !ids.insert(id) {
            verdict.push(Violation::DuplicateMeterEntry { id });
        }
    }
    let mut ids = HashSet::new();
    for id in &tx.ban {
        if !ids.insert(*id) {
            verdict.push(Violation::DuplicateMeterEntry { id: *id });
        }
    }
    let payload = Transaction::Rt(tx.clone()).signing_payload();
    if !tx.sig.verify_key(&view.genesis().dso_key, &payload) {
        verdict.push(Violation::BadSignature { input: None });
    }
    verdict
}
