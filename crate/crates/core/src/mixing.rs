//! Custodial tumbler. A participant asks for an escrow ticket, pays one
//! denomination unit to the ticket's fresh escrow address, then joins the
//! round with that output, the ticket's secret and a fresh target address.
//! The settlement spends every escrowed unit in one transaction and pays
//! the targets in a uniformly random order.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::KeyPair;
use crate::fixed::{Amount, Power};
use crate::transactions::{EnergyFinancialTx, LedgerView, OutputRef, Transaction};
use crate::types::{Address, Asset, EnergyAsset, FinancialAsset, Nonce, Timestep, TxId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RoundId(pub u64);

impl std::fmt::Display for RoundId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// How inputs are matched against a round's denomination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominationPolicy {
    /// Inputs must equal the template exactly.
    #[default]
    Exact,
    /// Any asset of the template's kind; only for demonstrating why equal
    /// denominations matter.
    SameKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixParams {
    pub k_min: usize,
    pub deadline_ticks: u64,
    pub policy: DenominationPolicy,
}

impl Default for MixParams {
    fn default() -> Self {
        MixParams { k_min: 8, deadline_ticks: 5, policy: DenominationPolicy::Exact }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundState {
    Open,
    Executing,
    Settled,
    Refunded,
}

/// Public view of a round. Participant identities are never exposed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixRound {
    pub id: RoundId,
    pub denomination: Asset,
    pub opened_at: Timestep,
    pub deadline: Timestep,
    pub state: RoundState,
    pub joined: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixReceipt {
    pub round: RoundId,
    pub settlement: TxId,
    pub refunded: bool,
}

/// Secret proving the holder requested this escrow address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpendToken(pub [u8; 32]);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EscrowTicket {
    pub round: RoundId,
    pub address: Address,
    pub token: SpendToken,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinRequest {
    /// The unit paid to the ticket's escrow address.
    pub input: OutputRef,
    pub token: SpendToken,
    pub target: Address,
    /// Where the unit goes back if the round is undersubscribed.
    pub refund: Address,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MixError {
    #[error("WRONG_DENOMINATION")]
    WrongDenomination,
    #[error("ROUND_CLOSED")]
    RoundClosed,
    #[error("REUSED_TARGET")]
    ReusedTarget,
    #[error("UNKNOWN_ROUND")]
    UnknownRound,
    #[error("UNAUTHORIZED_INPUT")]
    UnauthorizedInput,
    #[error("NOT_READY")]
    NotReady,
    #[error("UNDERSUBSCRIBED({joined}<{k_min})")]
    Undersubscribed { joined: usize, k_min: usize, refund: Option<Box<EnergyFinancialTx>> },
}

impl MixError {
    pub fn code(&self) -> &'static str {
        match self {
            MixError::WrongDenomination => "WRONG_DENOMINATION",
            MixError::RoundClosed => "ROUND_CLOSED",
            MixError::ReusedTarget => "REUSED_TARGET",
            MixError::UnknownRound => "UNKNOWN_ROUND",
            MixError::UnauthorizedInput => "UNAUTHORIZED_INPUT",
            MixError::NotReady => "NOT_READY",
            MixError::Undersubscribed { .. } => "UNDERSUBSCRIBED",
        }
    }
}

#[derive(Debug, Clone)]
struct Participant {
    input: OutputRef,
    escrow: Address,
    asset: Asset,
    target: Address,
    refund: Address,
}

#[derive(Debug, Clone)]
struct Escrow {
    round: RoundId,
    key: KeyPair,
    token: SpendToken,
    used: bool,
}

#[derive(Debug, Clone)]
pub struct Mixer {
    params: MixParams,
    rng: ChaCha20Rng,
    next_round: u64,
    rounds: BTreeMap<RoundId, MixRound>,
    /// Private input-to-target map; dropped once a round settles.
    participants: HashMap<RoundId, Vec<Participant>>,
    escrow: HashMap<Address, Escrow>,
    seen_targets: HashSet<Address>,
}

impl Mixer {
    pub fn new(params: MixParams, seed: u64) -> Self {
        Mixer {
            params,
            rng: ChaCha20Rng::seed_from_u64(seed),
            next_round: 0,
            rounds: BTreeMap::new(),
            participants: HashMap::new(),
            escrow: HashMap::new(),
            seen_targets: HashSet::new(),
        }
    }

    pub fn params(&self) -> MixParams {
        self.params
    }

    pub fn open_round(&mut self, denomination: Asset, now: Timestep) -> RoundId {
        let id = RoundId(self.next_round);
        self.next_round += 1;
        self.rounds.insert(
            id,
            MixRound {
                id,
                denomination,
                opened_at: now,
                deadline: now.plus(self.params.deadline_ticks),
                state: RoundState::Open,
                joined: 0,
            },
        );
        self.participants.insert(id, Vec::new());
        id
    }

    pub fn round(&self, id: RoundId) -> Option<&MixRound> {
        self.rounds.get(&id)
    }

    pub fn rounds(&self) -> impl Iterator<Item = &MixRound> {
        self.rounds.values()
    }

    /// Open round for `denomination`, if any.
    pub fn find_open(&self, denomination: &Asset) -> Option<RoundId> {
        self.rounds
            .values()
            .find(|r| r.state == RoundState::Open && r.denomination == *denomination)
            .map(|r| r.id)
    }

    pub fn escrow_ticket(&mut self, round: RoundId) -> Result<EscrowTicket, MixError> {
        let r = self.rounds.get(&round).ok_or(MixError::UnknownRound)?;
        if r.state != RoundState::Open {
            return Err(MixError::RoundClosed);
        }
        let key = KeyPair::generate(&mut self.rng);
        let mut token = [0u8; 32];
        self.rng.fill_bytes(&mut token);
        let address = key.address();
        self.escrow.insert(address, Escrow { round, key, token: SpendToken(token), used: false });
        Ok(EscrowTicket { round, address, token: SpendToken(token) })
    }

    fn accepts(&self, denomination: &Asset, asset: &Asset) -> bool {
        match self.params.policy {
            DenominationPolicy::Exact => asset == denomination,
            DenominationPolicy::SameKind => asset.kind() == denomination.kind(),
        }
    }

    pub fn join_round<V: LedgerView + ?Sized>(
        &mut self,
        round: RoundId,
        req: JoinRequest,
        view: &V,
        now: Timestep,
    ) -> Result<(), MixError> {
        let r = self.rounds.get(&round).ok_or(MixError::UnknownRound)?;
        if r.state != RoundState::Open || now > r.deadline {
            return Err(MixError::RoundClosed);
        }
        let record = view.output(&req.input).filter(|_| !view.is_spent(&req.input));
        let Some(record) = record else { return Err(MixError::UnauthorizedInput) };
        match self.escrow.get(&record.address) {
            Some(e) if e.round == round && e.token == req.token && !e.used => {}
            _ => return Err(MixError::UnauthorizedInput),
        }
        if !self.accepts(&r.denomination, &record.asset) {
            return Err(MixError::WrongDenomination);
        }
        if req.target == req.refund
            || self.seen_targets.contains(&req.target)
            || self.seen_targets.contains(&req.refund)
        {
            return Err(MixError::ReusedTarget);
        }
        self.seen_targets.insert(req.target);
        self.seen_targets.insert(req.refund);
        self.escrow.get_mut(&record.address).expect("escrow").used = true;
        let (asset, escrow) = (record.asset, record.address);
        self.participants.get_mut(&round).expect("round").push(Participant {
            input: req.input,
            escrow,
            asset,
            target: req.target,
            refund: req.refund,
        });
        self.rounds.get_mut(&round).expect("round").joined += 1;
        Ok(())
    }

    /// Settles the round if it reached `k_min`; refunds it once the
    /// deadline passed without enough participants.
    pub fn execute_round(&mut self, round: RoundId, now: Timestep) -> Result<(EnergyFinancialTx, MixReceipt), MixError> {
        let r = self.rounds.get(&round).ok_or(MixError::UnknownRound)?;
        if r.state != RoundState::Open {
            return Err(MixError::RoundClosed);
        }
        let joined = r.joined;
        if joined < self.params.k_min && now < r.deadline {
            return Err(MixError::NotReady);
        }
        self.rounds.get_mut(&round).expect("round").state = RoundState::Executing;
        let mut parts = self.participants.remove(&round).unwrap_or_default();
        parts.sort_by_key(|p| p.input);

        let mut nonce = Nonce::default();
        self.rng.fill_bytes(&mut nonce.0);
        let mut tx = EnergyFinancialTx::new(nonce);
        for p in &parts {
            tx.add_input(p.input);
        }
        let refunded = joined < self.params.k_min;
        if refunded {
            for p in &parts {
                tx.outputs.push(p.asset, p.refund);
            }
        } else {
            let mut order: Vec<usize> = (0..parts.len()).collect();
            order.shuffle(&mut self.rng);
            for i in order {
                tx.outputs.push(parts[i].asset, parts[i].target);
            }
        }
        let keys: HashMap<OutputRef, &KeyPair> =
            parts.iter().map(|p| (p.input, &self.escrow[&p.escrow].key)).collect();
        tx.sign_with(|r| keys.get(r).copied());
        self.escrow.retain(|_, e| e.round != round);
        let state = if refunded { RoundState::Refunded } else { RoundState::Settled };
        self.rounds.get_mut(&round).expect("round").state = state;
        if refunded {
            let refund = (!parts.is_empty()).then(|| Box::new(tx));
            return Err(MixError::Undersubscribed { joined, k_min: self.params.k_min, refund });
        }
        let settlement = Transaction::Eft(tx.clone()).id();
        Ok((tx, MixReceipt { round, settlement, refunded }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum SplitError {
    #[error("unit and asset differ in kind or interval")]
    Incompatible,
    #[error("zero-sized unit")]
    ZeroUnit,
}

/// One asset cut into denomination units. `remainder` holds whatever does
/// not fill a whole unit and cannot be mixed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub tx: EnergyFinancialTx,
    /// Output indices (within the unit's kind) of the full units.
    pub units: Vec<u32>,
    pub remainder: Option<(u32, Asset)>,
}

impl Split {
    pub fn unmixable(&self) -> bool {
        self.remainder.is_some()
    }
}

/// Builds one unsigned transaction per input, each paying `unit`-sized
/// pieces to addresses drawn from `next_address`. Energy inputs must share
/// the unit's interval.
pub fn split_to_denominations(
    inputs: &[(OutputRef, Asset)],
    unit: &Asset,
    mut next_address: impl FnMut() -> Address,
    mut next_nonce: impl FnMut() -> Nonce,
) -> Result<Vec<Split>, SplitError> {
    let mut out = Vec::with_capacity(inputs.len());
    for (r, asset) in inputs {
        let (n, rest) = match (asset, unit) {
            (Asset::Fa(a), Asset::Fa(u)) => {
                if u.amount.0 == 0 {
                    return Err(SplitError::ZeroUnit);
                }
                (a.amount.0 / u.amount.0, a.amount.0 % u.amount.0)
            }
            (Asset::Epa(a), Asset::Epa(u)) | (Asset::Eca(a), Asset::Eca(u)) => {
                if (a.start, a.end) != (u.start, u.end) {
                    return Err(SplitError::Incompatible);
                }
                if u.power.0 == 0 {
                    return Err(SplitError::ZeroUnit);
                }
                (a.power.0 / u.power.0, a.power.0 % u.power.0)
            }
            _ => return Err(SplitError::Incompatible),
        };
        let mut tx = EnergyFinancialTx::new(next_nonce());
        tx.add_input(*r);
        let units = (0..n).map(|_| tx.outputs.push(*unit, next_address()).1).collect();
        let remainder = (rest > 0).then(|| {
            let piece = with_size(unit, rest);
            (tx.outputs.push(piece, next_address()).1, piece)
        });
        out.push(Split { tx, units, remainder });
    }
    Ok(out)
}

fn with_size(template: &Asset, raw: u64) -> Asset {
    match template {
        Asset::Fa(_) => Asset::Fa(FinancialAsset { amount: Amount(raw) }),
        Asset::Epa(e) => Asset::Epa(EnergyAsset { power: Power(raw), ..*e }),
        Asset::Eca(e) => Asset::Eca(EnergyAsset { power: Power(raw), ..*e }),
    }
}

/// Ledger-only observer used to score unlinkability. It resolves a
/// transaction's inputs, groups inputs and outputs by identical asset, and
/// pairs each group position by position (inputs in list order, outputs in
/// list order). Against a uniformly shuffled settlement this is as good as
/// any guess: its expected accuracy is one over the group size.
pub fn link_guess<V: LedgerView + ?Sized>(view: &V, tx: &EnergyFinancialTx) -> Vec<(OutputRef, Address)> {
    let mut outputs: Vec<(Asset, Address)> = tx.outputs.iter().map(|(_, _, a, addr)| (a, addr)).collect();
    let mut guess = Vec::new();
    for input in tx.inputs() {
        let Some(rec) = view.output(&input.out) else { continue };
        if let Some(pos) = outputs.iter().position(|(a, _)| *a == rec.asset) {
            let (_, addr) = outputs.remove(pos);
            guess.push((input.out, addr));
        } else if !outputs.is_empty() {
            let (_, addr) = outputs.remove(0);
            guess.push((input.out, addr));
        }
    }
    guess
}

/// Fraction of inputs whose guessed destination is the true one.
pub fn link_accuracy(guess: &[(OutputRef, Address)], truth: &HashMap<OutputRef, Address>) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = guess.iter().filter(|(i, a)| truth.get(i) == Some(a)).count();
    hits as f64 / truth.len() as f64
}

