//! Trusted smart meter: withdrawal limits, anonymous deposit addresses,
//! deposit obligations and per-timeslot billing.

use std::collections::{BTreeMap, HashMap};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::KeyPair;
use crate::fixed::{Amount, Money, NetPower, Power};
use crate::ledger::Ledger;
use crate::profile::StepFunction;
use crate::transactions::{active_prices, LedgerView, Outputs, SmartMeterTx, Transaction};
use crate::types::{Address, Asset, AssetKind, EnergyAsset, MeterId, Nonce, ProsumerId, Timestep, TxId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeterLimits {
    pub max_epa: Power,
    pub max_eca: Power,
    /// Cap on FA withdrawn and not yet deposited or paid back.
    pub credit_limit: Amount,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
pub enum Denial {
    #[error("LIMIT_EXCEEDED({kind}, t={t})")]
    LimitExceeded { kind: AssetKind, t: Timestep },
    #[error("PAST_INTERVAL")]
    PastInterval,
    #[error("CREDIT_EXCEEDED")]
    CreditExceeded,
    #[error("OBLIGATION_OUTSTANDING(t={t})")]
    ObligationOutstanding { t: Timestep },
    #[error("INVALID_REQUEST")]
    InvalidRequest,
}

impl Denial {
    pub fn code(&self) -> &'static str {
        match self {
            Denial::LimitExceeded { .. } => "LIMIT_EXCEEDED",
            Denial::PastInterval => "PAST_INTERVAL",
            Denial::CreditExceeded => "CREDIT_EXCEEDED",
            Denial::ObligationOutstanding { .. } => "OBLIGATION_OUTSTANDING",
            Denial::InvalidRequest => "INVALID_REQUEST",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
#[error("MISSING_MEASUREMENT(t={t})")]
pub struct MissingMeasurement {
    pub t: Timestep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WithdrawalStatus {
    Pending,
    Recorded(Timestep),
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Withdrawal {
    pub tx_id: TxId,
    pub issued_at: Timestep,
    pub outputs: Outputs,
    pub status: WithdrawalStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deposit {
    pub tx_id: TxId,
    pub timeslot: Timestep,
    pub address: Address,
    pub asset: Asset,
}

/// ECA deposited beyond what the account owes or can take back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverDeposit {
    pub tx_id: TxId,
    pub start: Timestep,
    pub end: Timestep,
    pub power: Power,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BillLine {
    pub prosumer: ProsumerId,
    pub t: Timestep,
    pub e: NetPower,
    pub b: Money,
}

/// Per-prosumer meter state. A single writer: the harness serializes all
/// calls on one account.
#[derive(Debug, Clone)]
pub struct MeterAccount {
    id: MeterId,
    prosumer: ProsumerId,
    key: KeyPair,
    limits: MeterLimits,
    rng: ChaCha20Rng,

    withdrawals: Vec<Withdrawal>,
    by_tx: HashMap<TxId, usize>,
    epa_issued: StepFunction,
    eca_issued: StepFunction,
    fa_issued: u64,

    obligation: StepFunction,
    /// Own ECA withdrawn and not yet returned; returns beyond obligations
    /// are absorbed here before being flagged.
    eca_returnable: StepFunction,

    deposit_keys: BTreeMap<Address, KeyPair>,
    deposits: Vec<Deposit>,
    over_deposits: Vec<OverDeposit>,
    fa_deposited: u64,
    payments: u64,

    epa_withdrawn: StepFunction,
    epa_deposited: StepFunction,
    fa_withdrawn_at: BTreeMap<Timestep, u64>,
    fa_deposited_at: BTreeMap<Timestep, u64>,

    measurements: BTreeMap<Timestep, NetPower>,
    cursor: usize,
}

impl MeterAccount {
    pub fn new(id: MeterId, prosumer: ProsumerId, key: KeyPair, limits: MeterLimits, seed: u64) -> Self {
        MeterAccount {
            id,
            prosumer,
            key,
            limits,
            rng: ChaCha20Rng::seed_from_u64(seed),
            withdrawals: Vec::new(),
            by_tx: HashMap::new(),
            epa_issued: StepFunction::new(),
            eca_issued: StepFunction::new(),
            fa_issued: 0,
            obligation: StepFunction::new(),
            eca_returnable: StepFunction::new(),
            deposit_keys: BTreeMap::new(),
            deposits: Vec::new(),
            over_deposits: Vec::new(),
            fa_deposited: 0,
            payments: 0,
            epa_withdrawn: StepFunction::new(),
            epa_deposited: StepFunction::new(),
            fa_withdrawn_at: BTreeMap::new(),
            fa_deposited_at: BTreeMap::new(),
            measurements: BTreeMap::new(),
            cursor: 0,
        }
    }

    pub fn id(&self) -> MeterId {
        self.id
    }

    pub fn prosumer(&self) -> ProsumerId {
        self.prosumer
    }

    pub fn public_key(&self) -> crate::types::PublicKey {
        self.key.public()
    }

    pub fn limits(&self) -> MeterLimits {
        self.limits
    }

    pub fn set_limits(&mut self, limits: MeterLimits) {
        self.limits = limits;
    }

    pub fn withdrawals(&self) -> &[Withdrawal] {
        &self.withdrawals
    }

    pub fn deposits(&self) -> &[Deposit] {
        &self.deposits
    }

    pub fn over_deposits(&self) -> &[OverDeposit] {
        &self.over_deposits
    }

    pub fn deposit_addresses(&self) -> impl Iterator<Item = &Address> {
        self.deposit_keys.keys()
    }

    pub fn deposit_key(&self, addr: &Address) -> Option<&KeyPair> {
        self.deposit_keys.get(addr)
    }

    pub fn obligation(&self, t: Timestep) -> Power {
        Power(self.obligation.value_at(t) as u64)
    }

    /// True when no obligation remains at any timestep.
    pub fn obligations_clear(&self) -> bool {
        self.obligation.is_zero()
    }

    /// Issued EPA (or ECA) coverage at `t`, counting withdrawals not rejected.
    pub fn issued(&self, kind: AssetKind, t: Timestep) -> Power {
        let f = match kind {
            AssetKind::Epa => &self.epa_issued,
            AssetKind::Eca => &self.eca_issued,
            AssetKind::Fa => return Power::ZERO,
        };
        Power(f.value_at(t) as u64)
    }

    /// FA withdrawn and neither deposited back nor paid off.
    pub fn credit_outstanding(&self) -> Amount {
        Amount(self.fa_issued.saturating_sub(self.fa_deposited + self.payments))
    }

    pub fn fresh_deposit_address(&mut self) -> Address {
        let key = KeyPair::generate(&mut self.rng);
        let addr = key.address();
        self.deposit_keys.insert(addr, key);
        addr
    }

    /// Checks the request against the account's limits and, if allowed,
    /// signs a smart-meter transaction paying the requested outputs.
    pub fn request_withdrawal(&mut self, want: Outputs, now: Timestep) -> Result<SmartMeterTx, Denial> {
        if want.is_empty() || want.iter().any(|(_, _, a, _)| a.check().is_err()) {
            return Err(Denial::InvalidRequest);
        }
        if want.epa.iter().chain(&want.eca).any(|o| o.asset.start < now) {
            return Err(Denial::PastInterval);
        }
        if let Some(t) = self.overdue_obligation(now) {
            return Err(Denial::ObligationOutstanding { t });
        }
        for (kind, list, issued, max) in [
            (AssetKind::Epa, &want.epa, &self.epa_issued, self.limits.max_epa),
            (AssetKind::Eca, &want.eca, &self.eca_issued, self.limits.max_eca),
        ] {
            let mut after = issued.clone();
            for o in list {
                after.add_asset(&o.asset, 1);
            }
            if let Some(t) = after.first_above(now, Timestep::MAX, max.0 as i128) {
                return Err(Denial::LimitExceeded { kind, t });
            }
        }
        let fa = want.total_fa().0;
        let outstanding = self.credit_outstanding().0;
        if outstanding.checked_add(fa).is_none_or(|v| v > self.limits.credit_limit.0) {
            return Err(Denial::CreditExceeded);
        }

        let mut nonce = Nonce::default();
        self.rng.fill_bytes(&mut nonce.0);
        let tx = SmartMeterTx::signed(want.clone(), self.id, nonce, &self.key);
        let tx_id = Transaction::Smt(tx.clone()).id();
        self.apply_issue(&want, 1);
        self.by_tx.insert(tx_id, self.withdrawals.len());
        self.withdrawals.push(Withdrawal {
            tx_id,
            issued_at: now,
            outputs: want,
            status: WithdrawalStatus::Pending,
        });
        Ok(tx)
    }

    fn apply_issue(&mut self, outs: &Outputs, sign: i128) {
        for o in &outs.epa {
            self.epa_issued.add_asset(&o.asset, sign);
            if sign > 0 {
                self.obligation.add_asset(&o.asset, 1);
            } else {
                self.obligation.map_range(o.asset.start, o.asset.end, |v| {
                    (v - o.asset.power.0 as i128).max(0)
                });
            }
        }
        for o in &outs.eca {
            self.eca_issued.add_asset(&o.asset, sign);
            if sign > 0 {
                self.eca_returnable.add_asset(&o.asset, 1);
            } else {
                self.eca_returnable.map_range(o.asset.start, o.asset.end, |v| {
                    (v - o.asset.power.0 as i128).max(0)
                });
            }
        }
        let fa = outs.total_fa().0;
        if sign > 0 {
            self.fa_issued += fa;
        } else {
            self.fa_issued -= fa;
        }
    }

    /// First timestep before `now` that still carries an obligation.
    pub fn overdue_obligation(&self, now: Timestep) -> Option<Timestep> {
        self.obligation.first_positive_before(now)
    }

    /// Rolls back a withdrawal the ledger refused to record.
    pub fn withdrawal_rejected(&mut self, tx_id: &TxId) {
        let Some(&i) = self.by_tx.get(tx_id) else { return };
        if self.withdrawals[i].status != WithdrawalStatus::Pending {
            return;
        }
        self.withdrawals[i].status = WithdrawalStatus::Rejected;
        let outs = self.withdrawals[i].outputs.clone();
        self.apply_issue(&outs, -1);
    }

    /// A bill payment made outside the ledger; restores credit.
    pub fn record_payment(&mut self, amount: Amount) {
        self.payments += amount.0;
    }

    pub fn record_measurement(&mut self, t: Timestep, net: NetPower) {
        self.measurements.insert(t, net);
    }

    pub fn measurement(&self, t: Timestep) -> Option<NetPower> {
        self.measurements.get(&t).copied()
    }

    /// Scans ledger entries appended since the last call: records this
    /// meter's withdrawals and every deposit to its deposit addresses.
    pub fn sync(&mut self, ledger: &Ledger) {
        let entries = &ledger.entries()[self.cursor.min(ledger.len())..];
        for entry in entries {
            let id = ledger.entry_id(entry.seq).expect("entry id");
            match &entry.tx {
                Transaction::Smt(tx) if tx.id == self.id => self.on_recorded(id, entry.timeslot),
                Transaction::Eft(tx) => {
                    for (_, _, asset, address) in tx.outputs.iter() {
                        if self.deposit_keys.contains_key(&address) {
                            self.on_deposit(Deposit { tx_id: id, timeslot: entry.timeslot, address, asset });
                        }
                    }
                }
                _ => {}
            }
        }
        self.cursor = ledger.len();
    }

    fn on_recorded(&mut self, tx_id: TxId, at: Timestep) {
        let Some(&i) = self.by_tx.get(&tx_id) else { return };
        let w = &mut self.withdrawals[i];
        if w.status != WithdrawalStatus::Pending {
            return;
        }
        w.status = WithdrawalStatus::Recorded(at);
        for o in &w.outputs.epa {
            self.epa_withdrawn.add_asset(&o.asset, 1);
        }
        let fa = w.outputs.total_fa().0;
        if fa > 0 {
            *self.fa_withdrawn_at.entry(at).or_default() += fa;
        }
    }

    /// Registers one deposited asset.
    fn on_deposit(&mut self, d: Deposit) {
        self.deposits.push(d);
        match d.asset {
            Asset::Fa(fa) => {
                self.fa_deposited += fa.amount.0;
                *self.fa_deposited_at.entry(d.timeslot).or_default() += fa.amount.0;
            }
            Asset::Epa(e) => {
                self.epa_deposited.add_asset(&e, 1);
                // Returned before it could be used: the matching obligation lapses.
                if d.timeslot < e.start {
                    self.obligation.subtract_floor(e.start, e.end, e.power.0 as i128);
                }
            }
            Asset::Eca(e) => {
                let excess = self.obligation.subtract_floor(e.start, e.end, e.power.0 as i128);
                for seg in excess.nonzero_segments() {
                    let beyond = self.eca_returnable.subtract_floor(seg.start, seg.end, seg.value);
                    for s in beyond.nonzero_segments() {
                        self.over_deposits.push(OverDeposit {
                            tx_id: d.tx_id,
                            start: s.start,
                            end: s.end,
                            power: Power(s.value as u64),
                        });
                    }
                }
            }
        }
    }

    /// `E = measured − deposited EPA coverage + withdrawn EPA coverage`.
    pub fn energy_balance(&self, t: Timestep) -> Result<NetPower, MissingMeasurement> {
        let measured = self.measurement(t).ok_or(MissingMeasurement { t })?;
        let e = measured.0 as i128 - self.epa_deposited.value_at(t) + self.epa_withdrawn.value_at(t);
        Ok(NetPower(e as i64))
    }

    /// `B = FA withdrawn during t − FA deposited during t + energy term`,
    /// where the energy term charges consumption and credits production at
    /// the prices active at `t`.
    pub fn compute_bill<V: LedgerView + ?Sized>(&self, t: Timestep, view: &V) -> Result<Money, MissingMeasurement> {
        let e = self.energy_balance(t)?;
        let prices = active_prices(view, t);
        let energy = if e.0 < 0 {
            // Net production is credited: E < 0 gives a negative term.
            Money::energy_cost(e, prices.production)
        } else {
            Money::energy_cost(e, prices.consumption)
        };
        let w = self.fa_withdrawn_at.get(&t).copied().unwrap_or(0);
        let d = self.fa_deposited_at.get(&t).copied().unwrap_or(0);
        Ok(Money::from_amount(Amount(w)) - Money::from_amount(Amount(d)) + energy)
    }

    pub fn bill_line<V: LedgerView + ?Sized>(&self, t: Timestep, view: &V) -> Result<BillLine, MissingMeasurement> {
        Ok(BillLine { prosumer: self.prosumer, t, e: self.energy_balance(t)?, b: self.compute_bill(t, view)? })
    }

    /// EPA withdrawn (recorded) minus EPA deposited at `t`: what the meter
    /// expects the prosumer to have sold net of purchases.
    pub fn net_epa_position(&self, t: Timestep) -> i128 {
        self.epa_withdrawn.value_at(t) - self.epa_deposited.value_at(t)
    }

    /// Recorded EPA withdrawals as intervals, for reporting.
    pub fn withdrawn_epa(&self) -> Vec<EnergyAsset> {
        self.withdrawals
            .iter()
            .filter(|w| matches!(w.status, WithdrawalStatus::Recorded(_)))
            .flat_map(|w| w.outputs.epa.iter().map(|o| o.asset))
            .collect()
    }
}
