//! Anonymous order board. Posting requires a proof token showing control
//! of the address that holds the offered assets.

use std::collections::{BTreeMap, HashMap};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{self, Signature};
use crate::fixed::{Amount, Price};
use crate::ledger::Ledger;
use crate::transactions::{LedgerView, OutputRef, Transaction};
use crate::types::{Address, Asset, AssetKind, ChannelId, EnergyAsset, Timestep, TxId};

pub const DEFAULT_CHALLENGE_EXPIRY: u64 = 10;

const CHALLENGE_DOMAIN: &[u8] = b"gridtrade/challenge/v1";
const SINK_DOMAIN: &[u8] = b"gridtrade/sink/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProofMode {
    /// Sign the challenge nonce with the address key.
    #[default]
    Signature,
    /// Spend from the address in a ledger transaction that also pays a zero
    /// FA to the challenge's sink address.
    ZeroTransfer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoardParams {
    pub challenge_expiry: u64,
    pub proof_mode: ProofMode,
}

impl Default for BoardParams {
    fn default() -> Self {
        BoardParams { challenge_expiry: DEFAULT_CHALLENGE_EXPIRY, proof_mode: ProofMode::Signature }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ChallengeId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OwnershipChallenge {
    pub id: ChallengeId,
    pub nonce: [u8; 32],
    pub address: Address,
    pub expires: Timestep,
}

impl OwnershipChallenge {
    /// Bytes the address key signs in signature mode.
    pub fn message(&self) -> Vec<u8> {
        let mut m = CHALLENGE_DOMAIN.to_vec();
        m.extend_from_slice(&self.id.0.to_le_bytes());
        m.extend_from_slice(&self.nonce);
        m.extend_from_slice(self.address.as_bytes());
        m
    }

    /// Address nobody holds a key for, derived from the nonce; the target
    /// of the zero transfer in transfer mode.
    pub fn sink(&self) -> Address {
        Address(crypto::sha256(&[SINK_DOMAIN, &self.nonce]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProofToken(pub [u8; 32]);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OrderId(pub u64);

impl std::fmt::Display for OrderId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "o{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Ask,
    Bid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderStatus {
    Open,
    Consumed,
    Withdrawn,
    Stale,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Order {
    pub id: OrderId,
    pub side: Side,
    /// EPA for asks; ECA then FA for bids.
    pub assets: Vec<OutputRef>,
    pub energy: EnergyAsset,
    pub budget: Option<Amount>,
    pub price: Price,
    pub channel: ChannelId,
    pub posted_at: Timestep,
    pub status: OrderStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
pub enum BoardError {
    #[error("BAD_SIGNATURE")]
    BadSignature,
    #[error("CHALLENGE_EXPIRED")]
    ChallengeExpired,
    #[error("CHALLENGE_REUSED")]
    ChallengeReused,
    #[error("UNKNOWN_CHALLENGE")]
    UnknownChallenge,
    #[error("WRONG_PROOF_MODE")]
    WrongProofMode,
    #[error("UNAUTHORIZED_TOKEN")]
    UnauthorizedToken,
    #[error("SPENT_ASSET")]
    SpentAsset,
    #[error("WRONG_ASSET_KIND")]
    WrongAssetKind,
    #[error("DUPLICATE_ORDER")]
    DuplicateOrder,
    #[error("UNKNOWN_ORDER")]
    UnknownOrder,
}

impl BoardError {
    pub fn code(&self) -> String {
        self.to_string()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderFilter {
    pub side: Option<Side>,
    /// Inclusive interval the order's energy must overlap.
    pub overlap: Option<(Timestep, Timestep)>,
    pub min_price: Option<Price>,
    pub max_price: Option<Price>,
}

#[derive(Debug, Clone)]
struct ChallengeState {
    challenge: OwnershipChallenge,
    used: bool,
}

#[derive(Debug, Clone)]
pub struct BidBoard {
    params: BoardParams,
    rng: ChaCha20Rng,
    next_challenge: u64,
    next_order: u64,
    challenges: HashMap<ChallengeId, ChallengeState>,
    tokens: HashMap<ProofToken, Address>,
    orders: BTreeMap<OrderId, Order>,
    open_by_ref: HashMap<OutputRef, OrderId>,
}

impl BidBoard {
    pub fn new(params: BoardParams, seed: u64) -> Self {
        BidBoard {
            params,
            rng: ChaCha20Rng::seed_from_u64(seed),
            next_challenge: 0,
            next_order: 0,
            challenges: HashMap::new(),
            tokens: HashMap::new(),
            orders: BTreeMap::new(),
            open_by_ref: HashMap::new(),
        }
    }

    pub fn params(&self) -> BoardParams {
        self.params
    }

    pub fn issue_challenge(&mut self, address: Address, now: Timestep) -> OwnershipChallenge {
        let id = ChallengeId(self.next_challenge);
        self.next_challenge += 1;
        let mut nonce = [0u8; 32];
        self.rng.fill_bytes(&mut nonce);
        let challenge =
            OwnershipChallenge { id, nonce, address, expires: now.plus(self.params.challenge_expiry) };
        self.challenges.insert(id, ChallengeState { challenge, used: false });
        challenge
    }

    fn take_challenge(&mut self, id: ChallengeId, now: Timestep) -> Result<OwnershipChallenge, BoardError> {
        let st = self.challenges.get(&id).ok_or(BoardError::UnknownChallenge)?;
        if st.used {
            return Err(BoardError::ChallengeReused);
        }
        if now > st.challenge.expires {
            return Err(BoardError::ChallengeExpired);
        }
        Ok(st.challenge)
    }

    fn grant(&mut self, id: ChallengeId, address: Address) -> ProofToken {
        self.challenges.get_mut(&id).expect("challenge").used = true;
        let mut t = [0u8; 32];
        self.rng.fill_bytes(&mut t);
        let token = ProofToken(t);
        self.tokens.insert(token, address);
        token
    }

    /// Signature-mode proof: `sig` must verify over the challenge message
    /// under the challenge's address. A good signature consumes the
    /// challenge.
    pub fn prove_ownership(&mut self, id: ChallengeId, sig: &Signature, now: Timestep) -> Result<ProofToken, BoardError> {
        if self.params.proof_mode != ProofMode::Signature {
            return Err(BoardError::WrongProofMode);
        }
        let ch = self.take_challenge(id, now)?;
        if !sig.verify_address(&ch.address, &ch.message()) {
            return Err(BoardError::BadSignature);
        }
        Ok(self.grant(id, ch.address))
    }

    /// Transfer-mode proof: `tx` must be on the ledger, pay a zero FA to the
    /// challenge's sink, and spend only outputs held by the challenged
    /// address. The ledger checked every input signature already.
    pub fn prove_by_transfer(
        &mut self,
        id: ChallengeId,
        tx: &TxId,
        ledger: &Ledger,
        now: Timestep,
    ) -> Result<ProofToken, BoardError> {
        if self.params.proof_mode != ProofMode::ZeroTransfer {
            return Err(BoardError::WrongProofMode);
        }
        let ch = self.take_challenge(id, now)?;
        let entry = ledger.seq_of(tx).map(|s| &ledger.entries()[s as usize]);
        let Some(Transaction::Eft(eft)) = entry.map(|e| &e.tx) else {
            return Err(BoardError::BadSignature);
        };
        let pays_sink = eft.outputs.fa.iter().any(|o| o.address == ch.sink() && o.asset.amount.0 == 0);
        let from_address = eft.input_count() > 0
            && eft.inputs().all(|i| ledger.output(&i.out).is_some_and(|r| r.address == ch.address));
        if !pays_sink || !from_address {
            return Err(BoardError::BadSignature);
        }
        Ok(self.grant(id, ch.address))
    }

    fn authorize<V: LedgerView + ?Sized>(
        &self,
        tokens: &[ProofToken],
        r: &OutputRef,
        kind: AssetKind,
        view: &V,
    ) -> Result<Asset, BoardError> {
        let rec = view.output(r).ok_or(BoardError::SpentAsset)?;
        if rec.asset.kind() != kind {
            return Err(BoardError::WrongAssetKind);
        }
        if !tokens.iter().any(|t| self.tokens.get(t) == Some(&rec.address)) {
            return Err(BoardError::UnauthorizedToken);
        }
        if view.is_spent(r) {
            return Err(BoardError::SpentAsset);
        }
        if self.open_by_ref.contains_key(r) {
            return Err(BoardError::DuplicateOrder);
        }
        Ok(rec.asset)
    }

    fn insert(&mut self, mut order: Order) -> OrderId {
        let id = OrderId(self.next_order);
        self.next_order += 1;
        order.id = id;
        for r in &order.assets {
            self.open_by_ref.insert(*r, id);
        }
        self.orders.insert(id, order);
        id
    }

    pub fn post_ask<V: LedgerView + ?Sized>(
        &mut self,
        token: ProofToken,
        epa: OutputRef,
        price: Price,
        channel: ChannelId,
        view: &V,
        now: Timestep,
    ) -> Result<OrderId, BoardError> {
        let asset = self.authorize(&[token], &epa, AssetKind::Epa, view)?;
        let energy = *asset.energy().expect("EPA");
        Ok(self.insert(Order {
            id: OrderId(0),
            side: Side::Ask,
            assets: vec![epa],
            energy,
            budget: None,
            price,
            channel,
            posted_at: now,
            status: OrderStatus::Open,
        }))
    }

    /// Posts a bid backed by an ECA and an FA. The two may sit at different
    /// addresses, so one token per address is accepted.
    #[allow(clippy::too_many_arguments)]
    pub fn post_bid<V: LedgerView + ?Sized>(
        &mut self,
        tokens: &[ProofToken],
        eca: OutputRef,
        fa: OutputRef,
        price: Price,
        channel: ChannelId,
        view: &V,
        now: Timestep,
    ) -> Result<OrderId, BoardError> {
        if eca == fa {
            return Err(BoardError::WrongAssetKind);
        }
        let e = self.authorize(tokens, &eca, AssetKind::Eca, view)?;
        let f = self.authorize(tokens, &fa, AssetKind::Fa, view)?;
        Ok(self.insert(Order {
            id: OrderId(0),
            side: Side::Bid,
            assets: vec![eca, fa],
            energy: *e.energy().expect("ECA"),
            budget: f.amount(),
            price,
            channel,
            posted_at: now,
            status: OrderStatus::Open,
        }))
    }

    /// Withdraws an open order; any token for one of its assets' addresses
    /// is accepted.
    pub fn withdraw<V: LedgerView + ?Sized>(&mut self, id: OrderId, token: ProofToken, view: &V) -> Result<(), BoardError> {
        let order = self.orders.get(&id).ok_or(BoardError::UnknownOrder)?;
        if order.status != OrderStatus::Open {
            return Err(BoardError::UnknownOrder);
        }
        let holder = self.tokens.get(&token).ok_or(BoardError::UnauthorizedToken)?;
        if !order.assets.iter().any(|r| view.output(r).is_some_and(|o| o.address == *holder)) {
            return Err(BoardError::UnauthorizedToken);
        }
        self.close(id, OrderStatus::Withdrawn);
        Ok(())
    }

    fn close(&mut self, id: OrderId, status: OrderStatus) {
        let order = self.orders.get_mut(&id).expect("order");
        order.status = status;
        for r in &order.assets {
            self.open_by_ref.remove(r);
        }
    }

    /// Closes open orders whose assets were spent: consumed when the
    /// spender swaps energy for money, stale otherwise.
    pub fn sync(&mut self, ledger: &Ledger) {
        let mut closing = Vec::new();
        for (r, id) in &self.open_by_ref {
            if let Some(spender) = ledger.spender(r) {
                let swap = ledger
                    .seq_of(&spender)
                    .and_then(|s| ledger.entries()[s as usize].tx.as_eft().cloned())
                    .is_some_and(|t| !t.epa_in.is_empty() && !t.fa_in.is_empty());
                closing.push((*id, if swap { OrderStatus::Consumed } else { OrderStatus::Stale }));
            }
        }
        closing.sort_by_key(|(id, _)| *id);
        closing.dedup_by_key(|(id, _)| *id);
        for (id, status) in closing {
            self.close(id, status);
        }
    }

    /// Open orders matching `filter`, by price then id.
    pub fn query(&self, filter: &OrderFilter) -> Vec<Order> {
        let mut v: Vec<Order> = self
            .orders
            .values()
            .filter(|o| o.status == OrderStatus::Open)
            .filter(|o| filter.side.is_none_or(|s| s == o.side))
            .filter(|o| filter.overlap.is_none_or(|(s, e)| o.energy.overlaps(s, e)))
            .filter(|o| filter.min_price.is_none_or(|p| o.price >= p))
            .filter(|o| filter.max_price.is_none_or(|p| o.price <= p))
            .cloned()
            .collect();
        v.sort_by_key(|o| (o.price, o.id));
        v
    }

    pub fn order(&self, id: OrderId) -> Option<&Order> {
        self.orders.get(&id)
    }

    /// Every order ever posted, in id order.
    pub fn orders(&self) -> impl Iterator<Item = &Order> {
        self.orders.values()
    }

    /// True iff no open order references a spent output.
    pub fn consistent_with(&self, ledger: &Ledger) -> bool {
        self.open_by_ref.keys().all(|r| ledger.is_unspent(r))
    }
}
