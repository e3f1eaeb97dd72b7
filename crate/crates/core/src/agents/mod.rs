//! Scripted prosumers: the sell and buy workflows, the constant
//! withdraw-mix-deposit discipline, and adversarial variants.

pub mod plan;

pub use plan::{stages_needed, Bundle, Denominations, EpochPlan, Stage};

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::board::{BidBoard, OrderFilter, OrderId, ProofMode, ProofToken, Side};
use crate::crypto::KeyPair;
use crate::fixed::{Amount, Price};
use crate::ledger::Ledger;
use crate::meter::MeterAccount;
use crate::mixing::{split_to_denominations, EscrowTicket, JoinRequest, Mixer, RoundId};
use crate::sim::bus::{Bus, Label, Message, Proposal, TraceEvent};
use crate::transactions::{
    EnergyFinancialTx, LedgerView, OutputRef, Outputs, Prices, RegulatoryTx, SmartMeterTx, Transaction,
};
use crate::types::{Address, Asset, AssetKind, ChannelId, EnergyAsset, MeterId, Nonce, ProsumerId, Timestep, TxId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Seller,
    Buyer,
    Idle,
    /// Seller that first asks its meter for more EPA than its limit.
    OverWithdrawer,
    /// Seller that never returns ECA or unsold EPA.
    ObligationDodger,
    /// Buyer that races a self-transfer against each settlement and
    /// replays losing spends.
    DoubleSpender,
    /// Idle prosumer submitting forged and tampered transactions.
    Forger,
    /// Idle prosumer posting orders without valid ownership proofs.
    Spammer,
}

impl Policy {
    pub fn sells(self) -> bool {
        matches!(self, Policy::Seller | Policy::OverWithdrawer | Policy::ObligationDodger)
    }

    pub fn buys(self) -> bool {
        matches!(self, Policy::Buyer | Policy::DoubleSpender)
    }

    pub fn trades(self) -> bool {
        self.sells() || self.buys()
    }

    pub fn adversarial(self) -> bool {
        !matches!(self, Policy::Seller | Policy::Buyer | Policy::Idle)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: ProsumerId,
    pub policy: Policy,
    /// Ask price for sellers, maximum price for buyers.
    pub price: Price,
    /// Units to sell or buy per epoch, capped by the bundle.
    pub units: u32,
}

/// Knobs shared by every agent in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentParams {
    pub bundle: Bundle,
    pub discipline: bool,
    pub proof_mode: ProofMode,
    /// Ticks a negotiation may stay unanswered before it is dropped.
    pub session_timeout: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TradeOutcome {
    Settled,
    Expired,
    Refunded,
    Denied,
    Idle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u64,
    pub outcome: TradeOutcome,
    pub sold: u32,
    pub bought: u32,
}

/// Ground truth kept for the checkers; never visible to the observer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentPrivate {
    pub addresses: BTreeSet<Address>,
    pub escrow: BTreeSet<Address>,
    /// Mixed unit (escrow output or hop input) to the address it reached.
    pub links: Vec<(OutputRef, Address)>,
    pub settlements: Vec<TxId>,
}

#[derive(Debug, Clone, Copy)]
struct Holding {
    r: OutputRef,
    asset: Asset,
    addr: Address,
}

#[derive(Debug, Clone)]
struct AskState {
    epa: OutputRef,
    asset: EnergyAsset,
    channel: ChannelId,
    busy_until: Option<Timestep>,
}

#[derive(Debug, Clone)]
struct Session {
    eca: OutputRef,
    fa: Vec<OutputRef>,
    epa_to: Address,
    change_to: Address,
    cost: Amount,
    expires: Timestep,
    submitted: bool,
}

#[derive(Debug, Clone)]
struct PendingEscrow {
    ticket: EscrowTicket,
    tx: TxId,
    kind: AssetKind,
    joined: bool,
}

#[derive(Debug, Clone, Default)]
struct EpochState {
    withdrew: bool,
    denied: bool,
    refunded: bool,
    escrows: Vec<PendingEscrow>,
    asks: BTreeMap<OrderId, AskState>,
    sold: BTreeSet<OutputRef>,
    reply: Option<ChannelId>,
    sessions: BTreeMap<OrderId, Session>,
    tried: BTreeSet<OrderId>,
    bought: u32,
    transfer_proofs: Vec<(crate::board::ChallengeId, TxId, OutputRef)>,
}

/// Everything an agent may touch during its turn.
pub struct Ctx<'a> {
    pub now: Timestep,
    pub plan: Option<&'a EpochPlan>,
    pub ledger: &'a Ledger,
    pub meter: &'a mut MeterAccount,
    pub mixer: &'a mut Mixer,
    pub board: &'a mut BidBoard,
    pub bus: &'a mut Bus,
    pub out: &'a mut Vec<Submission>,
    /// Other prosumers' meter ids, for forgery attempts.
    pub meter_ids: &'a [MeterId],
}

#[derive(Debug, Clone)]
pub struct Submission {
    pub tx: Transaction,
    pub label: Label,
    /// Submitting prosumer; `None` for services.
    pub from: Option<ProsumerId>,
    /// Marks a market settlement, for ground truth.
    pub settlement: bool,
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub spec: AgentSpec,
    params: AgentParams,
    rng: ChaCha20Rng,
    keys: BTreeMap<Address, KeyPair>,
    /// Addresses that may hold assets, with the epoch that created them.
    active: BTreeMap<Address, u64>,
    locked: HashMap<OutputRef, Timestep>,
    pending: HashMap<TxId, Vec<OutputRef>>,
    epoch: EpochState,
    epoch_index: Option<u64>,
    reports: Vec<EpochReport>,
    private: AgentPrivate,
    next_race: u64,
    replay: Vec<EnergyFinancialTx>,
    deposits: HashSet<TxId>,
}

impl Agent {
    pub fn new(spec: AgentSpec, params: AgentParams, seed: u64) -> Self {
        Agent {
            spec,
            params,
            rng: ChaCha20Rng::seed_from_u64(seed),
            keys: BTreeMap::new(),
            active: BTreeMap::new(),
            locked: HashMap::new(),
            pending: HashMap::new(),
            epoch: EpochState::default(),
            epoch_index: None,
            reports: Vec::new(),
            private: AgentPrivate::default(),
            next_race: 0,
            replay: Vec::new(),
            deposits: HashSet::new(),
        }
    }

    pub fn id(&self) -> ProsumerId {
        self.spec.id
    }

    pub fn reports(&self) -> &[EpochReport] {
        &self.reports
    }

    pub fn private(&self) -> &AgentPrivate {
        &self.private
    }

    fn fresh_address(&mut self, epoch: u64) -> Address {
        let key = KeyPair::generate(&mut self.rng);
        let addr = key.address();
        self.keys.insert(addr, key);
        self.active.insert(addr, epoch);
        self.private.addresses.insert(addr);
        addr
    }

    fn nonce(&mut self) -> Nonce {
        let mut n = Nonce::default();
        self.rng.fill_bytes(&mut n.0);
        n
    }

    fn channel(&mut self) -> ChannelId {
        let mut c = ChannelId::default();
        self.rng.fill_bytes(&mut c.0);
        c
    }

    fn holdings(&self, ledger: &Ledger, max_epoch: Option<u64>) -> Vec<Holding> {
        let mut out = Vec::new();
        for (addr, epoch) in &self.active {
            if max_epoch.is_some_and(|m| *epoch > m) {
                continue;
            }
            for (r, asset) in ledger.query_unspent(addr) {
                if !self.locked.contains_key(&r) {
                    out.push(Holding { r, asset, addr: *addr });
                }
            }
        }
        out
    }

    fn sign(&self, tx: &mut EnergyFinancialTx, ledger: &Ledger) {
        let owners: HashMap<OutputRef, Address> =
            tx.inputs().filter_map(|i| ledger.output(&i.out).map(|o| (i.out, o.address))).collect();
        tx.sign_with(|r| owners.get(r).and_then(|a| self.keys.get(a)));
    }

    fn lock(&mut self, refs: &[OutputRef], until: Timestep) {
        for r in refs {
            self.locked.insert(*r, until);
        }
    }

    fn submit(&mut self, ctx: &mut Ctx, tx: EnergyFinancialTx, label: Label, settlement: bool) -> TxId {
        let refs: Vec<OutputRef> = tx.inputs().map(|i| i.out).collect();
        self.lock(&refs, Timestep::MAX);
        let t = Transaction::Eft(tx);
        let id = t.id();
        self.pending.insert(id, refs);
        ctx.out.push(Submission { tx: t, label, from: Some(self.spec.id), settlement });
        id
    }

    /// Moves one holding to `to` in its own transaction.
    fn transfer(&mut self, ctx: &mut Ctx, h: &Holding, to: Address) -> TxId {
        let mut tx = EnergyFinancialTx::new(self.nonce());
        tx.add_input(h.r);
        tx.outputs.push(h.asset, to);
        self.sign(&mut tx, ctx.ledger);
        self.submit(ctx, tx, Label::Honest, false)
    }

    /// Called by the harness with each delivered outcome of this agent's
    /// submissions.
    pub fn on_outcome(&mut self, tx: &TxId, accepted: bool) {
        if let Some(refs) = self.pending.remove(tx) {
            if !accepted {
                for r in refs {
                    self.locked.remove(&r);
                }
            }
        }
    }

    fn start_epoch(&mut self, plan: &EpochPlan) {
        if let Some(prev) = self.epoch_index {
            self.close_epoch(prev);
        }
        self.epoch = EpochState::default();
        self.epoch_index = Some(plan.index);
    }

    fn close_epoch(&mut self, index: u64) {
        let e = &self.epoch;
        let sold = e.sold.len() as u32;
        let outcome = if e.denied {
            TradeOutcome::Denied
        } else if sold > 0 || e.bought > 0 {
            TradeOutcome::Settled
        } else if e.refunded {
            TradeOutcome::Refunded
        } else if self.spec.policy.trades() {
            TradeOutcome::Expired
        } else {
            TradeOutcome::Idle
        };
        self.reports.push(EpochReport { epoch: index, outcome, sold, bought: e.bought });
    }

    /// Final bookkeeping at the end of a run.
    pub fn finish(&mut self) {
        if let Some(i) = self.epoch_index.take() {
            self.close_epoch(i);
        }
    }

    pub fn act(&mut self, ctx: &mut Ctx) {
        let now = ctx.now;
        self.locked.retain(|r, until| *until >= now && !ctx.ledger.spender(r).is_some());
        if let Some(plan) = ctx.plan {
            if now == plan.start {
                self.start_epoch(plan);
            }
            if self.epoch_index == Some(plan.index) {
                self.run_stage(ctx, plan);
            }
        }
        self.replay_losers(ctx);
        self.sweep(ctx);
        self.prune(ctx.ledger, now);
    }

    fn run_stage(&mut self, ctx: &mut Ctx, plan: &EpochPlan) {
        let now = ctx.now;
        match plan.stage_at(now) {
            Some(Stage::Withdraw) => self.withdraw(ctx, plan),
            Some(Stage::Split) => self.split(ctx, plan),
            Some(Stage::Escrow(r)) => self.escrow(ctx, plan, r),
            Some(Stage::Hop) => self.hop(ctx, plan),
            Some(Stage::Post) => {
                self.post(ctx, plan);
                self.misbehave(ctx, plan);
            }
            Some(Stage::PostConfirm) => self.post_confirm(ctx, plan),
            _ => {}
        }
        // Joins are retried until the round executes, in case an escrow
        // payment landed late.
        for r in 0..plan.mix_rounds {
            if now >= plan.tick_of(Stage::Join(r)) && now < plan.tick_of(Stage::Execute(r)).plus(1) {
                self.join(ctx, plan, r);
            }
        }
        self.trade(ctx, plan);
    }

    fn participates(&self) -> bool {
        self.params.discipline || self.spec.policy.trades()
    }

    fn withdraw(&mut self, ctx: &mut Ctx, plan: &EpochPlan) {
        let now = ctx.now;
        let outstanding = ctx.meter.credit_outstanding();
        if outstanding.0 > 0 {
            ctx.meter.record_payment(outstanding);
            ctx.bus.record(TraceEvent::Payment { tick: now, prosumer: self.spec.id, amount: outstanding });
        }
        if !self.participates() {
            return;
        }
        let b = self.params.bundle;
        let policy = self.spec.policy;
        let (epa, eca, fa) = if self.params.discipline {
            (b.epa_units, b.eca_units, b.fa_units)
        } else if policy.sells() {
            (b.epa_units, 0, 0)
        } else {
            (0, b.eca_units, b.fa_units)
        };
        let (s, e) = (plan.delivery.0 .0, plan.delivery.1 .0);
        if policy == Policy::OverWithdrawer {
            let limit = ctx.meter.limits().max_epa;
            let mut greedy = Outputs::default();
            let a = self.fresh_address(plan.index);
            greedy.push(Asset::epa(crate::fixed::Power(limit.0 + plan.units.epa.0), s, e), a);
            let res = ctx.meter.request_withdrawal(greedy, now);
            let result = match res {
                Ok(tx) => {
                    ctx.out.push(Submission {
                        tx: Transaction::Smt(tx),
                        label: Label::adversarial("over_withdraw"),
                        from: Some(self.spec.id),
                        settlement: false,
                    });
                    "signed".to_string()
                }
                Err(d) => format!("denied:{}", d.code()),
            };
            ctx.bus.record(TraceEvent::Meter {
                tick: now,
                prosumer: self.spec.id,
                result,
                label: Label::adversarial("over_withdraw"),
            });
        }
        let mut want = Outputs::default();
        let scaled = |unit: u64, n: u32| unit * n as u64;
        if epa > 0 {
            let a = self.fresh_address(plan.index);
            want.push(Asset::epa(crate::fixed::Power(scaled(plan.units.epa.0, epa)), s, e), a);
        }
        if eca > 0 {
            let a = self.fresh_address(plan.index);
            want.push(Asset::eca(crate::fixed::Power(scaled(plan.units.eca.0, eca)), s, e), a);
        }
        if fa > 0 {
            let a = self.fresh_address(plan.index);
            want.push(Asset::fa(Amount(scaled(plan.units.fa.0, fa))), a);
        }
        if want.is_empty() {
            return;
        }
        let (result, tx): (String, Option<SmartMeterTx>) = match ctx.meter.request_withdrawal(want, now) {
            Ok(tx) => ("signed".into(), Some(tx)),
            Err(d) => (format!("denied:{}", d.code()), None),
        };
        ctx.bus.record(TraceEvent::Meter { tick: now, prosumer: self.spec.id, result, label: Label::Honest });
        match tx {
            Some(tx) => {
                self.epoch.withdrew = true;
                ctx.out.push(Submission { tx: Transaction::Smt(tx), label: Label::Honest, from: Some(self.spec.id), settlement: false });
            }
            None => self.epoch.denied = true,
        }
    }

    fn split(&mut self, ctx: &mut Ctx, plan: &EpochPlan) {
        let holdings: Vec<Holding> =
            self.holdings(ctx.ledger, None).into_iter().filter(|h| self.active.get(&h.addr) == Some(&plan.index)).collect();
        for h in holdings {
            let unit = plan.unit(h.asset.kind());
            if h.asset == unit {
                continue;
            }
            let mut fresh: Vec<Address> = Vec::new();
            let n = match (h.asset, unit) {
                (Asset::Fa(a), Asset::Fa(u)) => a.amount.0.div_ceil(u.amount.0.max(1)),
                (a, u) => a.energy().map(|e| e.power.0).unwrap_or(0).div_ceil(u.energy().map(|e| e.power.0.max(1)).unwrap_or(1)),
            };
            for _ in 0..n {
                fresh.push(self.fresh_address(plan.index));
            }
            let nonce = self.nonce();
            let mut it = fresh.into_iter();
            let Ok(mut splits) = split_to_denominations(&[(h.r, h.asset)], &unit, || it.next().expect("address"), || nonce) else {
                continue;
            };
            let mut tx = splits.remove(0).tx;
            self.sign(&mut tx, ctx.ledger);
            self.submit(ctx, tx, Label::Honest, false);
        }
    }

    fn units_of(&self, ledger: &Ledger, plan: &EpochPlan) -> Vec<Holding> {
        self.holdings(ledger, None)
            .into_iter()
            .filter(|h| self.active.get(&h.addr) == Some(&plan.index) && h.asset == plan.unit(h.asset.kind()))
            .collect()
    }

    fn escrow(&mut self, ctx: &mut Ctx, plan: &EpochPlan, r: u32) {
        for h in self.units_of(ctx.ledger, plan) {
            let Some(round) = plan.round(r, h.asset.kind()) else { continue };
            let Ok(ticket) = ctx.mixer.escrow_ticket(round) else { continue };
            self.private.escrow.insert(ticket.address);
            let tx = self.transfer(ctx, &h, ticket.address);
            self.epoch.escrows.push(PendingEscrow { ticket, tx, kind: h.asset.kind(), joined: false });
        }
    }

    fn join(&mut self, ctx: &mut Ctx, plan: &EpochPlan, r: u32) {
        let round_ids: Vec<Option<RoundId>> = AssetKind::ALL.iter().map(|k| plan.round(r, *k)).collect();
        let mut escrows = std::mem::take(&mut self.epoch.escrows);
        for e in escrows.iter_mut().filter(|e| !e.joined && round_ids.contains(&Some(e.ticket.round))) {
            let input = OutputRef { tx: e.tx, kind: e.kind, index: 0 };
            if !ctx.ledger.is_unspent(&input) {
                continue;
            }
            let target = self.fresh_address(plan.index);
            let refund = self.fresh_address(plan.index);
            let req = JoinRequest { input, token: e.ticket.token, target, refund };
            if ctx.mixer.join_round(e.ticket.round, req, ctx.ledger, ctx.now).is_ok() {
                e.joined = true;
                self.private.links.push((input, target));
            }
        }
        self.epoch.escrows = escrows;
    }

    fn hop(&mut self, ctx: &mut Ctx, plan: &EpochPlan) {
        for h in self.units_of(ctx.ledger, plan) {
            let to = self.fresh_address(plan.index);
            self.transfer(ctx, &h, to);
            self.private.links.push((h.r, to));
        }
    }

    fn prove(&mut self, ctx: &mut Ctx, addr: Address) -> Option<ProofToken> {
        let ch = ctx.board.issue_challenge(addr, ctx.now);
        let key = self.keys.get(&addr)?;
        let sig = key.sign(&ch.message());
        let res = ctx.board.prove_ownership(ch.id, &sig, ctx.now);
        res.ok()
    }

    fn post(&mut self, ctx: &mut Ctx, plan: &EpochPlan) {
        let units = self.units_of(ctx.ledger, plan);
        let want = self.spec.units as usize;
        if self.spec.policy.sells() {
            let epas: Vec<Holding> = units.iter().filter(|h| h.asset.kind() == AssetKind::Epa).take(want).copied().collect();
            for h in epas {
                match self.params.proof_mode {
                    ProofMode::Signature => {
                        if let Some(token) = self.prove(ctx, h.addr) {
                            self.post_ask(ctx, token, &h);
                        }
                    }
                    ProofMode::ZeroTransfer => {
                        let ch = ctx.board.issue_challenge(h.addr, ctx.now);
                        let mut tx = EnergyFinancialTx::new(self.nonce());
                        tx.add_input(h.r);
                        tx.outputs.push(h.asset, h.addr);
                        tx.outputs.push(Asset::fa(Amount::ZERO), ch.sink());
                        self.sign(&mut tx, ctx.ledger);
                        let id = self.submit(ctx, tx, Label::Honest, false);
                        let fresh = OutputRef { tx: id, kind: AssetKind::Epa, index: 0 };
                        self.epoch.transfer_proofs.push((ch.id, id, fresh));
                    }
                }
            }
        }
        if self.spec.policy.buys() {
            let ecas: Vec<Holding> = units.iter().filter(|h| h.asset.kind() == AssetKind::Eca).take(want).copied().collect();
            let fas: Vec<Holding> = units.iter().filter(|h| h.asset.kind() == AssetKind::Fa).copied().collect();
            let reply = self.channel();
            self.epoch.reply = Some(reply);
            if self.params.proof_mode == ProofMode::Signature {
                for (eca, fa) in ecas.iter().zip(fas.iter()) {
                    let (Some(t1), Some(t2)) = (self.prove(ctx, eca.addr), self.prove(ctx, fa.addr)) else { continue };
                    let res = ctx.board.post_bid(&[t1, t2], eca.r, fa.r, self.spec.price, reply, ctx.ledger, ctx.now);
                    ctx.bus.record(TraceEvent::Board {
                        tick: ctx.now,
                        action: "post_bid".into(),
                        result: result_code(&res),
                        label: Label::Honest,
                    });
                }
            }
        }
    }

    fn post_ask(&mut self, ctx: &mut Ctx, token: ProofToken, h: &Holding) {
        let channel = self.channel();
        let res = ctx.board.post_ask(token, h.r, self.spec.price, channel, ctx.ledger, ctx.now);
        ctx.bus.record(TraceEvent::Board { tick: ctx.now, action: "post_ask".into(), result: result_code(&res), label: Label::Honest });
        if let (Ok(id), Some(e)) = (res, h.asset.energy()) {
            self.epoch.asks.insert(id, AskState { epa: h.r, asset: *e, channel, busy_until: None });
        }
    }

    fn post_confirm(&mut self, ctx: &mut Ctx, _plan: &EpochPlan) {
        let proofs = std::mem::take(&mut self.epoch.transfer_proofs);
        for (ch, tx, fresh) in proofs {
            let Ok(token) = ctx.board.prove_by_transfer(ch, &tx, ctx.ledger, ctx.now) else { continue };
            let Some(rec) = ctx.ledger.output(&fresh).copied() else { continue };
            let h = Holding { r: fresh, asset: rec.asset, addr: rec.address };
            self.post_ask(ctx, token, &h);
        }
    }

    fn trade(&mut self, ctx: &mut Ctx, plan: &EpochPlan) {
        let now = ctx.now;
        if self.spec.policy.sells() {
            self.answer_proposals(ctx, plan);
        }
        if self.spec.policy.buys() {
            self.read_replies(ctx, plan);
            let (from, to) = plan.propose_window();
            if now >= from && now <= to {
                self.propose(ctx, plan);
            }
        }
    }

    fn answer_proposals(&mut self, ctx: &mut Ctx, plan: &EpochPlan) {
        let now = ctx.now;
        let ids: Vec<OrderId> = self.epoch.asks.keys().copied().collect();
        for id in ids {
            let ask = self.epoch.asks[&id].clone();
            let msgs = ctx.bus.take(&ask.channel);
            if ctx.ledger.spender(&ask.epa).is_some_and(|tx| !self.deposits.contains(&tx)) {
                self.epoch.sold.insert(ask.epa);
            }
            let busy = ask.busy_until.is_some_and(|u| now <= u) || !ctx.ledger.is_unspent(&ask.epa) || now > plan.deposit_tick();
            let mut accepted = busy;
            for msg in msgs {
                let Message::Propose(p) = msg else { continue };
                if p.ask != id {
                    continue;
                }
                let tx = (!accepted).then(|| self.settlement(ctx, &ask, &p)).flatten();
                match tx {
                    Some(tx) => {
                        accepted = true;
                        self.lock(&[ask.epa], now.plus(self.params.session_timeout));
                        self.epoch.asks.get_mut(&id).expect("ask").busy_until = Some(now.plus(self.params.session_timeout));
                        ctx.bus.send(now, p.reply, Message::Accept { ask: id, tx });
                    }
                    None => ctx.bus.send(now, p.reply, Message::Reject { ask: id }),
                }
            }
        }
    }

    /// Builds and half-signs the swap for a proposal, or `None` if the
    /// proposal does not pay for the ask.
    fn settlement(&mut self, ctx: &mut Ctx, ask: &AskState, p: &Proposal) -> Option<EnergyFinancialTx> {
        let l = ctx.ledger;
        let eca = l.output(&p.eca).filter(|_| l.is_unspent(&p.eca))?;
        if eca.asset != Asset::Eca(ask.asset) {
            return None;
        }
        let mut paid = 0u64;
        for r in &p.fa {
            let o = l.output(r).filter(|_| l.is_unspent(r))?;
            paid += o.asset.amount()?.0;
        }
        let cost = self.spec.price.cost_of(ask.asset.power, ask.asset.ticks());
        if paid < cost.0 {
            return None;
        }
        let epoch = self.epoch_index.unwrap_or(0);
        let eca_to = self.fresh_address(epoch);
        let fa_to = self.fresh_address(epoch);
        let mut tx = EnergyFinancialTx::new(self.nonce());
        tx.add_input(ask.epa);
        tx.add_input(p.eca);
        for r in &p.fa {
            tx.add_input(*r);
        }
        tx.outputs.push(Asset::Epa(ask.asset), p.epa_to);
        tx.outputs.push(Asset::Eca(ask.asset), eca_to);
        tx.outputs.push(Asset::fa(cost), fa_to);
        if paid > cost.0 {
            tx.outputs.push(Asset::fa(Amount(paid - cost.0)), p.change_to);
        }
        self.sign(&mut tx, ctx.ledger);
        Some(tx)
    }

    fn propose(&mut self, ctx: &mut Ctx, plan: &EpochPlan) {
        let Some(reply) = self.epoch.reply else { return };
        let open_sessions = self.epoch.sessions.len() as u32;
        let mut wants = self.spec.units.saturating_sub(self.epoch.bought + open_sessions);
        if wants == 0 {
            return;
        }
        let filter = OrderFilter {
            side: Some(Side::Ask),
            overlap: Some(plan.delivery),
            max_price: Some(self.spec.price),
            min_price: None,
        };
        // Random order spreads buyers over the asks instead of all racing
        // for the cheapest one.
        let mut asks = ctx.board.query(&filter);
        asks.shuffle(&mut self.rng);
        let mut units = self.units_of(ctx.ledger, plan);
        for ask in asks {
            if wants == 0 {
                break;
            }
            if self.epoch.tried.contains(&ask.id) || self.epoch.sessions.contains_key(&ask.id) {
                continue;
            }
            let Some(pos) = units.iter().position(|h| h.asset == Asset::Eca(ask.energy)) else { break };
            let eca = units.remove(pos);
            let cost = ask.price.cost_of(ask.energy.power, ask.energy.ticks());
            let mut fa = Vec::new();
            let mut sum = 0u64;
            while sum < cost.0 {
                let Some(pos) = units.iter().position(|h| h.asset.kind() == AssetKind::Fa) else { break };
                let h = units.remove(pos);
                sum += h.asset.amount().map(|a| a.0).unwrap_or(0);
                fa.push(h.r);
            }
            if sum < cost.0 {
                break;
            }
            let epa_to = self.fresh_address(plan.index);
            let change_to = self.fresh_address(plan.index);
            let expires = ctx.now.plus(self.params.session_timeout);
            let mut refs = fa.clone();
            refs.push(eca.r);
            self.lock(&refs, expires);
            let proposal = Proposal { ask: ask.id, eca: eca.r, fa: fa.clone(), epa_to, change_to, reply };
            ctx.bus.send(ctx.now, ask.channel, Message::Propose(proposal));
            self.epoch.sessions.insert(ask.id, Session { eca: eca.r, fa, epa_to, change_to, cost, expires, submitted: false });
            wants -= 1;
        }
    }

    fn read_replies(&mut self, ctx: &mut Ctx, _plan: &EpochPlan) {
        let now = ctx.now;
        let Some(reply) = self.epoch.reply else { return };
        for msg in ctx.bus.take(&reply) {
            match msg {
                Message::Accept { ask, tx } => self.on_accept(ctx, ask, tx),
                Message::Reject { ask } => {
                    if let Some(s) = self.epoch.sessions.remove(&ask) {
                        self.unlock_session(&s);
                    }
                    self.epoch.tried.insert(ask);
                }
                Message::Propose(_) => {}
            }
        }
        // Sessions that never got an answer, or whose settlement failed.
        let done: Vec<OrderId> = self
            .epoch
            .sessions
            .iter()
            .filter(|(_, s)| {
                let spent = ctx.ledger.spender(&s.eca).is_some();
                (s.submitted && spent) || (!spent && now > s.expires)
            })
            .map(|(id, _)| *id)
            .collect();
        for id in done {
            let s = self.epoch.sessions.remove(&id).expect("session");
            let won = ctx.ledger.output(&OutputRef { tx: ctx.ledger.spender(&s.eca).unwrap_or_default(), kind: AssetKind::Epa, index: 0 })
                .is_some_and(|o| o.address == s.epa_to);
            if won {
                self.epoch.bought += 1;
            } else {
                self.unlock_session(&s);
                self.epoch.tried.insert(id);
            }
        }
    }

    fn unlock_session(&mut self, s: &Session) {
        self.locked.remove(&s.eca);
        for r in &s.fa {
            self.locked.remove(r);
        }
    }

    fn on_accept(&mut self, ctx: &mut Ctx, ask: OrderId, mut tx: EnergyFinancialTx) {
        let Some(s) = self.epoch.sessions.get(&ask).cloned() else { return };
        let Some(order) = ctx.board.order(ask).cloned() else { return };
        let epa_ok = tx.epa_in.len() == 1
            && tx.epa_in[0].out == order.assets[0]
            && tx.outputs.epa.len() == 1
            && tx.outputs.epa[0].address == s.epa_to
            && tx.outputs.epa[0].asset == order.energy;
        let eca_ok = tx.eca_in.len() == 1 && tx.eca_in[0].out == s.eca;
        let fa_in: Vec<OutputRef> = tx.fa_in.iter().map(|i| i.out).collect();
        let paid: u64 = s.fa.iter().filter_map(|r| ctx.ledger.output(r)).filter_map(|o| o.asset.amount()).map(|a| a.0).sum();
        let change: u64 = tx.outputs.fa.iter().filter(|o| o.address == s.change_to).map(|o| o.asset.amount.0).sum();
        let fair = paid.saturating_sub(s.cost.0) == change;
        if !(epa_ok && eca_ok && fa_in == s.fa && fair) {
            self.epoch.sessions.remove(&ask);
            self.unlock_session(&s);
            self.epoch.tried.insert(ask);
            return;
        }
        self.sign(&mut tx, ctx.ledger);
        let mut refs = s.fa.clone();
        refs.push(s.eca);
        if self.spec.policy == Policy::DoubleSpender {
            let race = self.race_id();
            let epoch = self.epoch_index.unwrap_or(0);
            let mine = self.fresh_address(epoch);
            let mut grab = EnergyFinancialTx::new(self.nonce());
            let mut total = 0u64;
            for r in &s.fa {
                grab.add_input(*r);
                total += ctx.ledger.output(r).and_then(|o| o.asset.amount()).map(|a| a.0).unwrap_or(0);
            }
            grab.outputs.push(Asset::fa(Amount(total)), mine);
            self.sign(&mut grab, ctx.ledger);
            self.submit(ctx, tx, Label::Race(race), true);
            self.replay.push(grab.clone());
            self.submit(ctx, grab, Label::Race(race), false);
        } else {
            self.submit(ctx, tx, Label::Honest, true);
        }
        self.lock(&refs, Timestep::MAX);
        if let Some(s) = self.epoch.sessions.get_mut(&ask) {
            s.submitted = true;
        }
    }

    fn race_id(&mut self) -> u64 {
        let id = ((self.spec.id.0 as u64) << 32) | self.next_race;
        self.next_race += 1;
        id
    }

    /// Double spender: re-submits race transactions whose inputs are
    /// already spent; these must always be rejected.
    fn replay_losers(&mut self, ctx: &mut Ctx) {
        if self.spec.policy != Policy::DoubleSpender {
            return;
        }
        let mut keep = Vec::new();
        for tx in std::mem::take(&mut self.replay) {
            let spent = tx.inputs().all(|i| ctx.ledger.spender(&i.out).is_some());
            let id = Transaction::Eft(tx.clone()).id();
            if spent && !ctx.ledger.contains(&id) && !self.pending.contains_key(&id) {
                let mut again = tx.clone();
                again.nonce = self.nonce();
                self.sign(&mut again, ctx.ledger);
                ctx.out.push(Submission {
                    tx: Transaction::Eft(again),
                    label: Label::adversarial("double_spend"),
                    from: Some(self.spec.id),
                    settlement: false,
                });
            } else if !spent {
                keep.push(tx);
            }
        }
        self.replay = keep;
    }

    fn misbehave(&mut self, ctx: &mut Ctx, plan: &EpochPlan) {
        match self.spec.policy {
            Policy::Forger => self.forge(ctx, plan),
            Policy::Spammer => self.spam(ctx),
            _ => {}
        }
    }

    fn forge(&mut self, ctx: &mut Ctx, plan: &EpochPlan) {
        let me = self.fresh_address(plan.index);
        let key = self.keys[&me].clone();
        // Spend someone else's output with our own key.
        let unspent = ctx.ledger.unspent();
        let foreign: Vec<_> = unspent.iter().filter(|(_, o)| !self.keys.contains_key(&o.address)).collect();
        if let Some((r, o)) = foreign.choose(&mut self.rng).copied() {
            let mut tx = EnergyFinancialTx::new(self.nonce());
            tx.add_input(*r);
            tx.outputs.push(o.asset, me);
            tx.sign_with(|_| Some(&key));
            ctx.out.push(self.adversarial(Transaction::Eft(tx), "forged_input"));
        }
        // A meter transaction under a registered id, signed by a stranger.
        if let Some(id) = ctx.meter_ids.choose(&mut self.rng).copied() {
            let mut outs = Outputs::default();
            outs.push(Asset::fa(Amount(100_000)), me);
            let tx = SmartMeterTx::signed(outs, id, self.nonce(), &key);
            ctx.out.push(self.adversarial(Transaction::Smt(tx), "forged_meter"));
        }
        // A regulation not signed by the operator.
        let prices = Prices { consumption: Price(0), production: Price(1_000_000) };
        let rt = RegulatoryTx::signed(Vec::new(), ctx.meter_ids.to_vec(), prices, ctx.now.plus(plan.latency), &key);
        ctx.out.push(self.adversarial(Transaction::Rt(rt), "forged_regulation"));
        // One of our own transfers, redirected after signing.
        if let Some(h) = self.units_of(ctx.ledger, plan).first().copied() {
            let mut tx = EnergyFinancialTx::new(self.nonce());
            tx.add_input(h.r);
            tx.outputs.push(h.asset, self.fresh_address(plan.index));
            self.sign(&mut tx, ctx.ledger);
            let victim = foreign.first().map(|(_, o)| o.address).unwrap_or(Address([7; 32]));
            let first = tx.outputs.iter().next().map(|(k, ..)| k);
            match first {
                Some(AssetKind::Epa) => tx.outputs.epa[0].address = victim,
                Some(AssetKind::Eca) => tx.outputs.eca[0].address = victim,
                _ => tx.outputs.fa[0].address = victim,
            }
            ctx.out.push(self.adversarial(Transaction::Eft(tx), "tampered"));
        }
    }

    fn adversarial(&self, tx: Transaction, kind: &str) -> Submission {
        Submission { tx, label: Label::adversarial(kind), from: Some(self.spec.id), settlement: false }
    }

    fn spam(&mut self, ctx: &mut Ctx) {
        let now = ctx.now;
        let unspent = ctx.ledger.unspent();
        let epas: Vec<_> = unspent.iter().filter(|(_, o)| o.asset.kind() == AssetKind::Epa).collect();
        let Some((r, o)) = epas.choose(&mut self.rng).copied() else { return };
        // No proof at all.
        let mut bogus = [0u8; 32];
        self.rng.fill_bytes(&mut bogus);
        let ch = self.channel();
        let res = ctx.board.post_ask(ProofToken(bogus), *r, Price(1), ch, ctx.ledger, now);
        ctx.bus.record(TraceEvent::Board { tick: now, action: "post_ask".into(), result: result_code(&res), label: Label::adversarial("spam") });
        // A proof for an address we do not control.
        let challenge = ctx.board.issue_challenge(o.address, now);
        let stranger = KeyPair::generate(&mut self.rng);
        let res = ctx.board.prove_ownership(challenge.id, &stranger.sign(&challenge.message()), now);
        ctx.bus.record(TraceEvent::Board { tick: now, action: "prove".into(), result: result_code(&res), label: Label::adversarial("spam") });
        if self.rng.random_bool(0.5) {
            let res = ctx.board.post_ask(ProofToken(bogus), *r, Price(1), ch, ctx.ledger, now);
            ctx.bus.record(TraceEvent::Board { tick: now, action: "post_ask".into(), result: result_code(&res), label: Label::adversarial("spam") });
        }
    }

    /// Deposits every holding of a finished epoch to fresh meter deposit
    /// addresses, one transfer per holding.
    fn sweep(&mut self, ctx: &mut Ctx) {
        let now = ctx.now;
        let current = self.epoch_index;
        let cutoff = match (ctx.plan, current) {
            (Some(p), Some(c)) if p.index == c && now < p.deposit_tick() => c.checked_sub(1),
            (_, c) => c,
        };
        let Some(cutoff) = cutoff else { return };
        let dodger = self.spec.policy == Policy::ObligationDodger;
        for h in self.holdings(ctx.ledger, Some(cutoff)) {
            if dodger && h.asset.kind() != AssetKind::Fa {
                continue;
            }
            if let Some(e) = h.asset.energy() {
                if self.epoch.asks.values().any(|a| a.epa == h.r) && e.start > now && ctx.plan.is_some_and(|p| now < p.deposit_tick()) {
                    continue;
                }
            }
            let to = ctx.meter.fresh_deposit_address();
            let id = self.transfer(ctx, &h, to);
            self.deposits.insert(id);
        }
    }

    /// Forgets addresses of old epochs that hold nothing.
    fn prune(&mut self, ledger: &Ledger, _now: Timestep) {
        let Some(current) = self.epoch_index else { return };
        let stale: Vec<Address> = self
            .active
            .iter()
            .filter(|(a, e)| **e + 1 < current && ledger.query_unspent(a).is_empty())
            .map(|(a, _)| *a)
            .collect();
        for a in stale {
            self.active.remove(&a);
        }
    }
}

fn result_code<T, E: std::fmt::Display>(res: &Result<T, E>) -> String {
    match res {
        Ok(_) => "ok".to_string(),
        Err(e) => format!("rejected:{e}"),
    }
}
