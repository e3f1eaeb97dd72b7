//! Several ledger replicas fed by a total-order broadcast with a fixed
//! delivery latency. Proposals reach each replica in its own arrival order;
//! the leader's arrival order is the agreed order every replica applies.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::Ledger;
use crate::transactions::{Genesis, Transaction, ValidationVerdict};
use crate::types::{Timestep, TxId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProposalId(pub u64);

#[derive(Debug, Clone)]
struct Proposal {
    id: ProposalId,
    tx: Transaction,
    submitted_at: Timestep,
}

#[derive(Debug, Clone)]
pub struct ReplicaNode {
    pub id: usize,
    ledger: Ledger,
    /// Proposals in the order this replica received them, last round only.
    inbox: Vec<ProposalId>,
}

impl ReplicaNode {
    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn last_arrivals(&self) -> &[ProposalId] {
        &self.inbox
    }
}

/// Result of one agreed proposal, identical on every replica.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub proposal: ProposalId,
    pub tx_id: TxId,
    pub submitted_at: Timestep,
    pub timeslot: Timestep,
    pub outcome: Result<u64, ValidationVerdict>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("replica {replica} diverged on proposal {proposal:?}")]
pub struct ReplicaDivergence {
    pub replica: usize,
    pub proposal: ProposalId,
}

#[derive(Debug, Clone)]
pub struct ReplicatedLedger {
    replicas: Vec<ReplicaNode>,
    pending: Vec<Proposal>,
    latency: u64,
    next_id: u64,
    rng: ChaCha20Rng,
}

impl ReplicatedLedger {
    pub fn new(genesis: Genesis, replicas: usize, latency: u64, seed: u64) -> Self {
        assert!(replicas > 0, "at least one replica");
        let base = Ledger::new(genesis);
        ReplicatedLedger {
            replicas: (0..replicas)
                .map(|id| ReplicaNode { id, ledger: base.clone(), inbox: Vec::new() })
                .collect(),
            pending: Vec::new(),
            latency,
            next_id: 0,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn latency(&self) -> u64 {
        self.latency
    }

    /// The leader's replica; all replicas agree on it after every delivery.
    pub fn ledger(&self) -> &Ledger {
        &self.replicas[0].ledger
    }

    pub fn replicas(&self) -> &[ReplicaNode] {
        &self.replicas
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn submit(&mut self, tx: Transaction, now: Timestep) -> ProposalId {
        let id = ProposalId(self.next_id);
        self.next_id += 1;
        self.pending.push(Proposal { id, tx, submitted_at: now });
        id
    }

    /// Delivers every proposal submitted at least `latency` ticks before
    /// `now`, appending the valid ones with timeslot `now`.
    pub fn deliver(&mut self, now: Timestep) -> Result<Vec<Delivery>, ReplicaDivergence> {
        let (due, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut self.pending)
            .into_iter()
            .partition(|p| p.submitted_at.0.saturating_add(self.latency) <= now.0);
        self.pending = rest;
        if due.is_empty() {
            for r in &mut self.replicas {
                r.inbox.clear();
            }
            return Ok(Vec::new());
        }
        for r in &mut self.replicas {
            let mut arrivals: Vec<ProposalId> = due.iter().map(|p| p.id).collect();
            arrivals.shuffle(&mut self.rng);
            r.inbox = arrivals;
        }
        let agreed = self.replicas[0].inbox.clone();
        let mut out = Vec::with_capacity(agreed.len());
        for pid in agreed {
            let p = due.iter().find(|p| p.id == pid).expect("due proposal");
            let mut first: Option<Result<u64, ValidationVerdict>> = None;
            for r in &mut self.replicas {
                let res = r.ledger.append(p.tx.clone(), now);
                match &first {
                    None => first = Some(res),
                    Some(f) if *f != res => {
                        return Err(ReplicaDivergence { replica: r.id, proposal: pid });
                    }
                    Some(_) => {}
                }
            }
            out.push(Delivery {
                proposal: pid,
                tx_id: p.tx.id(),
                submitted_at: p.submitted_at,
                timeslot: now,
                outcome: first.expect("at least one replica"),
            });
        }
        Ok(out)
    }

    /// True when every replica exposes the same state hash.
    pub fn in_agreement(&self) -> bool {
        let h = self.replicas[0].ledger.state_hash();
        self.replicas.iter().all(|r| r.ledger.state_hash() == h)
    }
}
