//! Append-only transaction log and the state derived from it.

mod replica;
mod snapshot;

pub use replica::{Delivery, ProposalId, ReplicaDivergence, ReplicaNode, ReplicatedLedger};
pub use snapshot::{LoadError, ReplayError};

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::crypto::sha256;
use crate::transactions::{
    active_prices, active_registry, apply_regulation, validate_eft, validate_rt, validate_smt, Genesis,
    LedgerView, MeterStatus, OutputRecord, OutputRef, Prices, Registry, RegulatoryTx, Transaction,
    ValidationVerdict, Violation,
};
use crate::types::{Address, Asset, MeterId, Timestep, TxId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub seq: u64,
    /// Tick at which the entry was agreed on.
    pub timeslot: Timestep,
    pub tx: Transaction,
}

#[derive(Debug, Clone, Default)]
struct DerivedState {
    outputs: HashMap<OutputRef, OutputRecord>,
    spent: HashMap<OutputRef, TxId>,
    unspent_by_address: BTreeMap<Address, BTreeSet<OutputRef>>,
    tx_index: HashMap<TxId, u64>,
    regulatory: Vec<RegulatoryTx>,
    /// Registry changes per meter in ledger order, keyed by effective time.
    meter_events: HashMap<MeterId, Vec<(Timestep, MeterStatus)>>,
}

const GENESIS_DOMAIN: &[u8] = b"gridtrade/genesis/v1";
const ENTRY_DOMAIN: &[u8] = b"gridtrade/entry/v1";

/// A ledger replica: genesis header, the ordered entries, their hash chain
/// and derived indexes. Derived state is a pure function of the entries.
#[derive(Debug, Clone)]
pub struct Ledger {
    genesis: Genesis,
    genesis_hash: [u8; 32],
    entries: Vec<LedgerEntry>,
    ids: Vec<TxId>,
    chain: Vec<[u8; 32]>,
    state: DerivedState,
}

impl Ledger {
    pub fn new(genesis: Genesis) -> Self {
        let genesis_hash = sha256(&[GENESIS_DOMAIN, &codec::encode(&genesis)]);
        Ledger {
            genesis,
            genesis_hash,
            entries: Vec::new(),
            ids: Vec::new(),
            chain: Vec::new(),
            state: DerivedState::default(),
        }
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry_id(&self, seq: u64) -> Option<TxId> {
        self.ids.get(seq as usize).copied()
    }

    pub fn seq_of(&self, id: &TxId) -> Option<u64> {
        self.state.tx_index.get(id).copied()
    }

    pub fn contains(&self, id: &TxId) -> bool {
        self.state.tx_index.contains_key(id)
    }

    pub fn last_timeslot(&self) -> Option<Timestep> {
        self.entries.last().map(|e| e.timeslot)
    }

    /// Validates `tx` as if it were appended at timeslot `now`.
    pub fn validate(&self, tx: &Transaction, now: Timestep) -> ValidationVerdict {
        let mut verdict = match tx {
            Transaction::Eft(t) => validate_eft(self, t),
            Transaction::Smt(t) => validate_smt(self, t, now),
            Transaction::Rt(t) => validate_rt(self, t, now),
        };
        let id = tx.id();
        if self.contains(&id) {
            verdict.violations.insert(0, Violation::Duplicate { id });
        }
        if let Some(last) = self.last_timeslot().filter(|last| now < *last) {
            verdict.violations.insert(0, Violation::TimeslotRegression { now, last });
        }
        verdict
    }

    /// Validates and, if valid, appends `tx` with timeslot `now`.
    pub fn append(&mut self, tx: Transaction, now: Timestep) -> Result<u64, ValidationVerdict> {
        let verdict = self.validate(&tx, now);
        if !verdict.is_valid() {
            return Err(verdict);
        }
        let seq = self.entries.len() as u64;
        self.push_entry(LedgerEntry { seq, timeslot: now, tx });
        Ok(seq)
    }

    fn push_entry(&mut self, entry: LedgerEntry) {
        let id = entry.tx.id();
        let prev = self.head_hash();
        let h = sha256(&[ENTRY_DOMAIN, &prev, &codec::encode(&entry)]);
        let st = &mut self.state;
        for r in entry.tx.spent_inputs() {
            st.spent.insert(r, id);
            if let Some(rec) = st.outputs.get(&r) {
                if let Some(set) = st.unspent_by_address.get_mut(&rec.address) {
                    set.remove(&r);
                    if set.is_empty() {
                        st.unspent_by_address.remove(&rec.address);
                    }
                }
            }
        }
        for (r, asset, address) in entry.tx.created_outputs(id) {
            st.outputs.insert(r, OutputRecord { asset, address });
            st.unspent_by_address.entry(address).or_default().insert(r);
        }
        if let Transaction::Rt(rt) = &entry.tx {
            let mut changes = Registry::new();
            apply_regulation(&mut changes, rt);
            for (m, status) in changes {
                st.meter_events.entry(m).or_default().push((rt.time, status));
            }
            st.regulatory.push(rt.clone());
        }
        st.tx_index.insert(id, entry.seq);
        self.ids.push(id);
        self.chain.push(h);
        self.entries.push(entry);
    }

    /// Unspent outputs held by `addr`, in output-reference order.
    pub fn query_unspent(&self, addr: &Address) -> Vec<(OutputRef, Asset)> {
        self.state
            .unspent_by_address
            .get(addr)
            .map(|set| set.iter().map(|r| (*r, self.state.outputs[r].asset)).collect())
            .unwrap_or_default()
    }

    /// Every unspent output, in output-reference order.
    pub fn unspent(&self) -> Vec<(OutputRef, OutputRecord)> {
        let mut v: Vec<_> = self
            .state
            .unspent_by_address
            .values()
            .flatten()
            .map(|r| (*r, self.state.outputs[r]))
            .collect();
        v.sort_by_key(|a| a.0);
        v
    }

    pub fn is_unspent(&self, r: &OutputRef) -> bool {
        self.state.outputs.contains_key(r) && !self.state.spent.contains_key(r)
    }

    /// Transaction that spent `r`, if any.
    pub fn spender(&self, r: &OutputRef) -> Option<TxId> {
        self.state.spent.get(r).copied()
    }

    pub fn active_prices(&self, t: Timestep) -> Prices {
        active_prices(self, t)
    }

    pub fn active_registry(&self, t: Timestep) -> Registry {
        active_registry(self, t)
    }

    pub fn genesis_hash(&self) -> [u8; 32] {
        self.genesis_hash
    }

    /// Hash-chain head after the last entry.
    pub fn head_hash(&self) -> [u8; 32] {
        self.chain.last().copied().unwrap_or(self.genesis_hash)
    }

    /// Hash-chain value right after entry `seq`.
    pub fn hash_at(&self, seq: u64) -> Option<[u8; 32]> {
        self.chain.get(seq as usize).copied()
    }

    /// Digest of the derived state alone, recomputed from the indexes.
    pub fn state_digest(&self) -> [u8; 32] {
        let unspent = self.unspent();
        let mut spent: Vec<_> = self.state.spent.iter().collect();
        spent.sort();
        sha256(&[
            &codec::encode(&unspent),
            &codec::encode(&spent),
            &codec::encode(&self.state.regulatory),
        ])
    }

    /// Hash of the chain head together with the derived-state digest.
    pub fn state_hash(&self) -> [u8; 32] {
        sha256(&[&self.head_hash(), &self.state_digest()])
    }
}

impl LedgerView for Ledger {
    fn genesis(&self) -> &Genesis {
        &self.genesis
    }

    fn output(&self, r: &OutputRef) -> Option<&OutputRecord> {
        self.state.outputs.get(r)
    }

    fn is_spent(&self, r: &OutputRef) -> bool {
        self.state.spent.contains_key(r)
    }

    fn regulatory(&self) -> &[RegulatoryTx] {
        &self.state.regulatory
    }

    fn meter_status(&self, id: MeterId, t: Timestep) -> Option<MeterStatus> {
        self.state
            .meter_events
            .get(&id)?
            .iter()
            .rev()
            .find(|(time, _)| *time < t)
            .map(|(_, s)| *s)
    }
}
