//! The discrete-tick runner.
//!
//! Each tick runs, in order: ledger delivery and outcome callbacks, meter
//! and board sync, measurements, the DSO, epoch planning, the mixer, bus
//! delivery, agents in a seeded random order, and finally submission of
//! everything produced during the tick.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::agents::{stages_needed, Agent, AgentParams, AgentSpec, Ctx, EpochPlan, Stage, Submission};
use crate::board::{BidBoard, BoardParams};
use crate::crypto::KeyPair;
use crate::dso::{forecast_load, Dso, FixedPrices, PriceStrategy};
use crate::fixed::NetPower;
use crate::ledger::{ProposalId, ReplicatedLedger};
use crate::meter::{MeterAccount, MeterLimits};
use crate::mixing::{MixError, MixParams, Mixer, RoundState};
use crate::profile::StepFunction;
use crate::sim::artifacts::{ForecastRecord, MeasurementRecord, PrivateTruth, ProsumerTruth, RunArtifacts, Summary, TradeRecord};
use crate::sim::bus::{Bus, Label, TraceEvent};
use crate::sim::config::ScenarioConfig;
use crate::transactions::{Genesis, LedgerView, Prices, Transaction};
use crate::types::{Address, AssetKind, MeterId, ProsumerId, Timestep};

struct Meta {
    from: Option<ProsumerId>,
    label: Label,
    settlement: bool,
}

pub struct World {
    cfg: ScenarioConfig,
    rng: ChaCha20Rng,
    now: Timestep,
    dso: Dso,
    strategy: Box<dyn PriceStrategy>,
    prices: Prices,
    ledger: ReplicatedLedger,
    meters: Vec<MeterAccount>,
    meter_ids: Vec<MeterId>,
    agents: Vec<Agent>,
    mixer: Mixer,
    board: BidBoard,
    bus: Bus,
    plans: Vec<EpochPlan>,
    meta: HashMap<ProposalId, Meta>,
    outbox: Vec<Submission>,
    owners: HashMap<Address, ProsumerId>,
    traded: Vec<StepFunction>,
    trades: Vec<TradeRecord>,
    measurements: Vec<MeasurementRecord>,
    forecasts: Vec<ForecastRecord>,
    divergence: Option<String>,
}

impl World {
    pub fn new(cfg: ScenarioConfig) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let dso = Dso::new(KeyPair::generate(&mut rng));
        let genesis = Genesis::new(dso.public_key(), cfg.prices, cfg.tick_seconds);
        let ledger = ReplicatedLedger::new(genesis, cfg.replicas, cfg.latency, rng.next_u64());
        let params = AgentParams {
            bundle: cfg.bundle,
            discipline: cfg.discipline.enabled,
            proof_mode: cfg.board.proof_mode,
            session_timeout: cfg.agents.session_timeout,
        };
        let mut meters = Vec::new();
        let mut agents = Vec::new();
        for (i, p) in cfg.roster().into_iter().enumerate() {
            let id = ProsumerId(i as u32);
            let limits = MeterLimits { max_epa: p.max_epa, max_eca: p.max_eca, credit_limit: p.credit_limit };
            let key = KeyPair::generate(&mut rng);
            meters.push(MeterAccount::new(MeterId(i as u32), id, key, limits, rng.next_u64()));
            let spec = AgentSpec { id, policy: p.policy, price: p.price, units: p.units };
            agents.push(Agent::new(spec, params, rng.next_u64()));
        }
        let mix = MixParams { k_min: cfg.mixing.k_min, deadline_ticks: cfg.mixing.deadline_ticks, policy: cfg.mixing.policy };
        let mixer = Mixer::new(mix, rng.next_u64());
        let board = BidBoard::new(
            BoardParams { challenge_expiry: cfg.board.challenge_expiry, proof_mode: cfg.board.proof_mode },
            rng.next_u64(),
        );
        let strategy: Box<dyn PriceStrategy> = match cfg.dso.strategy.threshold() {
            Some(t) => Box::new(t),
            None => Box::new(FixedPrices),
        };
        let n = agents.len();
        World {
            prices: cfg.prices,
            bus: Bus::new(cfg.latency),
            meter_ids: (0..n as u32).map(MeterId).collect(),
            cfg,
            rng,
            now: Timestep(0),
            dso,
            strategy,
            ledger,
            meters,
            agents,
            mixer,
            board,
            plans: Vec::new(),
            meta: HashMap::new(),
            outbox: Vec::new(),
            owners: HashMap::new(),
            traded: vec![StepFunction::new(); n],
            trades: Vec::new(),
            measurements: Vec::new(),
            forecasts: Vec::new(),
            divergence: None,
        }
    }

    pub fn ledger(&self) -> &ReplicatedLedger {
        &self.ledger
    }

    pub fn now(&self) -> Timestep {
        self.now
    }

    /// Runs every configured tick and collects the artifacts.
    pub fn run(mut self) -> RunArtifacts {
        while self.now.0 < self.cfg.ticks && self.divergence.is_none() {
            self.step();
        }
        self.finish()
    }

    pub fn step(&mut self) {
        let now = self.now;
        self.deliver();
        let ledger = self.ledger.ledger();
        for m in &mut self.meters {
            m.sync(ledger);
        }
        self.board.sync(ledger);
        self.measure();
        self.regulate();
        self.plan_epoch();
        self.run_mixer();
        self.bus.deliver(now);
        self.run_agents();
        self.submit_all();
        self.now = now.plus(1);
    }

    fn deliver(&mut self) {
        let now = self.now;
        let deliveries = match self.ledger.deliver(now) {
            Ok(d) => d,
            Err(e) => {
                self.divergence = Some(e.to_string());
                return;
            }
        };
        for d in deliveries {
            let Some(meta) = self.meta.remove(&d.proposal) else { continue };
            let accepted = d.outcome.is_ok();
            let (seq, codes) = match &d.outcome {
                Ok(seq) => (Some(*seq), Vec::new()),
                Err(v) => (None, v.codes().into_iter().map(String::from).collect()),
            };
            self.bus.record(TraceEvent::Outcome {
                tick: now,
                proposal: d.proposal.0,
                tx: d.tx_id,
                accepted,
                seq,
                codes,
                label: meta.label.clone(),
            });
            let ledger = self.ledger.ledger();
            if let Some(from) = meta.from {
                let entry_tx = seq.and_then(|s| ledger.entries().get(s as usize)).map(|e| &e.tx);
                if !accepted {
                    self.meters[from.0 as usize].withdrawal_rejected(&d.tx_id);
                }
                self.agents[from.0 as usize].on_outcome(&d.tx_id, accepted);
                if let (true, Some(Transaction::Eft(tx))) = (meta.settlement, entry_tx) {
                    let seller = tx
                        .epa_in
                        .first()
                        .and_then(|i| ledger.output(&i.out))
                        .and_then(|o| self.owners.get(&o.address).copied());
                    if let (Some(seller), Some(out)) = (seller, tx.outputs.epa.first()) {
                        let energy = out.asset;
                        self.traded[from.0 as usize].add_asset(&energy, 1);
                        self.traded[seller.0 as usize].add_asset(&energy, -1);
                        self.trades.push(TradeRecord { tx: d.tx_id, recorded_at: now, seller, buyer: from, energy });
                    }
                }
            }
        }
    }

    /// Delivered-as-traded measurements plus bounded noise.
    fn measure(&mut self) {
        let t = self.now;
        let noise = self.cfg.measurements.noise_mw as i64;
        for (i, m) in self.meters.iter_mut().enumerate() {
            let jitter = if noise > 0 { self.rng.random_range(-noise..=noise) } else { 0 };
            let net = NetPower(self.traded[i].value_at(t) as i64 + jitter);
            m.record_measurement(t, net);
            self.measurements.push(MeasurementRecord { prosumer: m.prosumer(), meter: m.id(), t, net });
        }
    }

    fn regulate(&mut self) {
        let now = self.now;
        let lat = self.cfg.latency;
        let issue = |w: &mut World, authorize, ban, prices, effective| {
            let rt = w.dso.issue_regulation(authorize, ban, prices, effective, now).expect("effective time ahead");
            w.outbox.push(Submission { tx: Transaction::Rt(rt), label: Label::Honest, from: None, settlement: false });
        };
        if now.0 == 0 {
            let authorize = self.meters.iter().map(|m| (m.id(), m.public_key())).collect();
            issue(self, authorize, Vec::new(), self.cfg.prices, Timestep(lat));
        }
        let scheduled: Vec<_> = self.cfg.regulations.iter().filter(|r| r.time - lat == now.0).cloned().collect();
        for r in scheduled {
            let prices = Prices { consumption: r.consumption, production: r.production };
            self.prices = prices;
            issue(self, Vec::new(), r.ban.iter().map(|b| MeterId(*b)).collect(), prices, Timestep(r.time));
        }
        let retired: HashSet<Address> = self.meters.iter().flat_map(|m| m.deposit_addresses().copied()).collect();
        let horizon = self.cfg.dso.forecast_horizon.max(1);
        let forecast = forecast_load(self.ledger.ledger(), &self.board, now, now.plus(horizon - 1), &retired);
        if let Some(p) = self.strategy.next_prices(&forecast, self.prices) {
            self.prices = p;
            issue(self, Vec::new(), Vec::new(), p, now.plus(lat));
        }
        self.forecasts.push(ForecastRecord { tick: now, prices: self.prices, forecast });
    }

    fn plan_epoch(&mut self) {
        let lat = self.cfg.latency;
        let len = self.cfg.epoch_length;
        let rounds = self.cfg.mixing.effective_rounds();
        let now = self.now.0;
        if now < lat || !(now - lat).is_multiple_of(len) {
            return;
        }
        // The deposits must be recorded within the run.
        if now + (stages_needed(rounds) + 1) * lat >= self.cfg.ticks {
            return;
        }
        let index = (now - lat) / len;
        self.plans.push(EpochPlan::new(index, self.now, lat, len, rounds, self.cfg.denominations));
    }

    fn run_mixer(&mut self) {
        let now = self.now;
        let Some(plan) = self.plans.last_mut() else { return };
        for r in 0..plan.mix_rounds {
            if plan.tick_of(Stage::Escrow(r)) == now {
                for (i, kind) in AssetKind::ALL.iter().enumerate() {
                    let unit = plan.unit(*kind);
                    let id = self.mixer.open_round(unit, now);
                    plan.rounds[r as usize][i] = Some(id);
                    self.bus.record(TraceEvent::Mix { tick: now, round: id, action: "open".into(), denomination: unit, joined: 0, tx: None });
                }
            }
            if now < plan.tick_of(Stage::Execute(r)) {
                continue;
            }
            for id in plan.rounds[r as usize].iter().flatten() {
                let Some(round) = self.mixer.round(*id) else { continue };
                if round.state != RoundState::Open {
                    continue;
                }
                let (joined, denomination) = (round.joined, round.denomination);
                let (action, tx) = match self.mixer.execute_round(*id, now) {
                    Ok((tx, _)) => ("settle", Some(tx)),
                    Err(MixError::Undersubscribed { refund, .. }) => ("refund", refund.map(|b| *b)),
                    Err(_) => continue,
                };
                let tx = tx.map(Transaction::Eft);
                self.bus.record(TraceEvent::Mix {
                    tick: now,
                    round: *id,
                    action: action.into(),
                    denomination,
                    joined,
                    tx: tx.as_ref().map(Transaction::id),
                });
                if let Some(tx) = tx {
                    self.outbox.push(Submission { tx, label: Label::Honest, from: None, settlement: false });
                }
            }
        }
    }

    fn current_plan(&self) -> Option<&EpochPlan> {
        self.plans.last().filter(|p| p.start <= self.now)
    }

    fn run_agents(&mut self) {
        let mut order: Vec<usize> = (0..self.agents.len()).collect();
        order.shuffle(&mut self.rng);
        let plan = self.current_plan().cloned();
        let ledger = self.ledger.ledger();
        for i in order {
            let mut ctx = Ctx {
                now: self.now,
                plan: plan.as_ref(),
                ledger,
                meter: &mut self.meters[i],
                mixer: &mut self.mixer,
                board: &mut self.board,
                bus: &mut self.bus,
                out: &mut self.outbox,
                meter_ids: &self.meter_ids,
            };
            self.agents[i].act(&mut ctx);
            let id = self.agents[i].id();
            for a in self.agents[i].private().addresses.iter().chain(&self.agents[i].private().escrow) {
                self.owners.entry(*a).or_insert(id);
            }
        }
    }

    fn submit_all(&mut self) {
        let now = self.now;
        for s in std::mem::take(&mut self.outbox) {
            let tx_id = s.tx.id();
            let kind = s.tx.kind_code().to_string();
            let pid = self.ledger.submit(s.tx, now);
            self.bus.record(TraceEvent::Submit { tick: now, proposal: pid.0, tx: tx_id, kind, label: s.label.clone() });
            self.meta.insert(pid, Meta { from: s.from, label: s.label, settlement: s.settlement });
        }
    }

    fn finish(mut self) -> RunArtifacts {
        for a in &mut self.agents {
            a.finish();
        }
        let ledger = self.ledger.ledger().clone();
        let mut bills = Vec::new();
        for m in &self.meters {
            for t in 0..self.now.0 {
                if let Ok(line) = m.bill_line(Timestep(t), &ledger) {
                    bills.push(line);
                }
            }
        }
        let prosumers = self
            .agents
            .iter()
            .zip(&self.meters)
            .map(|(a, m)| ProsumerTruth {
                prosumer: a.id(),
                meter: m.id(),
                policy: a.spec.policy,
                limits: m.limits(),
                agent: a.private().clone(),
                deposit_addresses: m.deposit_addresses().copied().collect(),
                reports: a.reports().to_vec(),
                obligations_clear: m.obligations_clear(),
            })
            .collect();
        let rounds: Vec<_> = self.mixer.rounds().collect();
        let summary = Summary {
            seed: self.cfg.seed,
            ticks: self.now.0,
            ledger_hash: hex::encode(ledger.state_hash()),
            entries: ledger.len(),
            replicas: self.cfg.replicas,
            replicas_agree: self.ledger.in_agreement(),
            divergence: self.divergence.clone(),
            epochs: self.plans.len() as u64,
            trades: self.trades.len(),
            mix_rounds_settled: rounds.iter().filter(|r| r.state == RoundState::Settled).count(),
            mix_rounds_refunded: rounds.iter().filter(|r| r.state == RoundState::Refunded).count(),
        };
        RunArtifacts {
            orders: self.board.orders().cloned().collect(),
            trace: self.bus.trace().to_vec(),
            config: self.cfg,
            ledger,
            measurements: self.measurements,
            bills,
            forecasts: self.forecasts,
            private: PrivateTruth { prosumers, trades: self.trades },
            summary,
        }
    }
}

/// Runs a scenario to completion.
pub fn run(cfg: ScenarioConfig) -> RunArtifacts {
    World::new(cfg).run()
}
