//! Invariant checkers. Every check runs on persisted artifacts only, so a
//! run directory can be re-checked offline.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::board::OrderStatus;
use crate::ledger::Ledger;
use crate::mixing::{link_accuracy, link_guess};
use crate::profile::StepFunction;
use crate::sim::artifacts::{self, ArtifactError, RunArtifacts};
use crate::sim::bus::{Label, TraceEvent};
use crate::sim::oracle;
use crate::transactions::{LedgerView, OutputRef, Transaction};
use crate::types::{Address, AssetKind, MeterId, ProsumerId, Timestep, TxId};

/// Random subsets drawn for the group bound.
pub const GROUP_SUBSETS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub checked: u64,
    pub violations: u64,
    /// Context of the first violation (tick, tx id, prosumer).
    pub first: Option<String>,
}

impl CheckOutcome {
    fn new(name: &str) -> Self {
        CheckOutcome { name: name.to_string(), passed: true, checked: 0, violations: 0, first: None }
    }

    fn ok(&mut self) {
        self.checked += 1;
    }

    fn fail(&mut self, context: impl FnOnce() -> String) {
        self.checked += 1;
        self.violations += 1;
        self.passed = false;
        if self.first.is_none() {
            self.first = Some(context());
        }
    }

    fn expect(&mut self, cond: bool, context: impl FnOnce() -> String) {
        if cond {
            self.ok()
        } else {
            self.fail(context)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrivacyStats {
    /// Multi-input settlements scored (mixing rounds).
    pub mix_rounds: usize,
    pub mix_accuracy: Option<f64>,
    /// Mean of 1/k over the scored rounds.
    pub mix_baseline: Option<f64>,
    /// Single-input transfers on a private link (mixing disabled).
    pub hops: usize,
    pub hop_accuracy: Option<f64>,
    pub trades: usize,
    /// Fraction of trades whose (seller meter, buyer meter) the observer
    /// traced correctly.
    pub counterparty_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub checks: Vec<CheckOutcome>,
    pub privacy: PrivacyStats,
    /// Meter results by code, from the trace (denials are expected for
    /// adversarial agents).
    pub meter_results: BTreeMap<String, u64>,
}

impl InvariantReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Loads a run directory and checks it. A snapshot that fails to replay is
/// reported as a failed `replay` check rather than an error.
pub fn check_dir(dir: &Path) -> Result<InvariantReport, ArtifactError> {
    let path = dir.join(artifacts::LEDGER);
    let bytes = std::fs::read(&path).map_err(|source| ArtifactError::Io { path: path.clone(), source })?;
    if let Err(e) = Ledger::replay(&bytes) {
        let mut c = CheckOutcome::new("replay");
        c.fail(|| e.to_string());
        return Ok(InvariantReport { checks: vec![c], ..InvariantReport::default() });
    }
    Ok(check(&RunArtifacts::read(dir)?))
}

pub fn check(art: &RunArtifacts) -> InvariantReport {
    let ix = Index::new(art);
    let mut checks = vec![check_replay(art), check_replicas(art)];
    checks.extend(check_safety(art, &ix));
    checks.extend(check_security(art, &ix));
    InvariantReport { checks, privacy: check_privacy(art, &ix), meter_results: meter_results(art) }
}

/// Ownership maps reconstructed from the ground-truth file.
struct Index {
    owner: HashMap<Address, ProsumerId>,
    deposit_owner: HashMap<Address, ProsumerId>,
    meter_of: HashMap<ProsumerId, MeterId>,
}

impl Index {
    fn new(art: &RunArtifacts) -> Self {
        let mut owner = HashMap::new();
        let mut deposit_owner = HashMap::new();
        let mut meter_of = HashMap::new();
        for p in &art.private.prosumers {
            for a in p.agent.addresses.iter().chain(&p.agent.escrow) {
                owner.insert(*a, p.prosumer);
            }
            for a in &p.deposit_addresses {
                deposit_owner.insert(*a, p.prosumer);
            }
            meter_of.insert(p.prosumer, p.meter);
        }
        Index { owner, deposit_owner, meter_of }
    }

    /// Who controls `addr` for accounting: the agent, or the agent whose
    /// meter owns the deposit address.
    fn account(&self, addr: &Address) -> Option<ProsumerId> {
        self.owner.get(addr).or_else(|| self.deposit_owner.get(addr)).copied()
    }
}

fn entry_tx<'a>(ledger: &'a Ledger, id: &TxId) -> Option<&'a Transaction> {
    ledger.seq_of(id).map(|s| &ledger.entries()[s as usize].tx)
}

fn check_replay(art: &RunArtifacts) -> CheckOutcome {
    let mut c = CheckOutcome::new("replay");
    match Ledger::replay(&art.ledger.snapshot()) {
        Ok(l) => {
            let h = hex::encode(l.state_hash());
            c.expect(h == art.summary.ledger_hash, || format!("state hash {h} != summary {}", art.summary.ledger_hash));
        }
        Err(e) => c.fail(|| e.to_string()),
    }
    c
}

fn check_replicas(art: &RunArtifacts) -> CheckOutcome {
    let mut c = CheckOutcome::new("replica_agreement");
    let ok = art.summary.replicas_agree && art.summary.divergence.is_none();
    c.expect(ok, || art.summary.divergence.clone().unwrap_or_else(|| "replica ledgers differ".into()));
    c
}

/// Net EPA (or ECA) each prosumer gave away, as step functions over time:
/// coverage of inputs it controlled minus coverage of outputs it received,
/// summed over every recorded EFT.
fn net_given(art: &RunArtifacts, ix: &Index, kind: AssetKind) -> HashMap<ProsumerId, StepFunction> {
    let outputs = oracle::all_outputs(&art.ledger);
    let mut net: HashMap<ProsumerId, StepFunction> = HashMap::new();
    for e in art.ledger.entries() {
        let Transaction::Eft(tx) = &e.tx else { continue };
        for i in tx.inputs() {
            let Some((asset, addr)) = outputs.get(&i.out) else { continue };
            if let (Some(p), Some(en)) = (ix.account(addr), asset.energy()) {
                if asset.kind() == kind {
                    net.entry(p).or_default().add_asset(en, 1);
                }
            }
        }
        for (_, _, asset, addr) in tx.outputs.iter() {
            if let (Some(p), Some(en)) = (ix.account(&addr), asset.energy()) {
                if asset.kind() == kind {
                    net.entry(p).or_default().add_asset(en, -1);
                }
            }
        }
    }
    net
}

fn check_safety(art: &RunArtifacts, ix: &Index) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    let limits: HashMap<ProsumerId, (i128, i128)> = art
        .private
        .prosumers
        .iter()
        .map(|p| (p.prosumer, (p.limits.max_epa.0 as i128, p.limits.max_eca.0 as i128)))
        .collect();
    let epa = net_given(art, ix, AssetKind::Epa);
    let eca = net_given(art, ix, AssetKind::Eca);
    for (name, net, pick) in [("net_sold_bound", &epa, 0usize), ("net_bought_bound", &eca, 1usize)] {
        let mut c = CheckOutcome::new(name);
        for p in &art.private.prosumers {
            let lim = if pick == 0 { limits[&p.prosumer].0 } else { limits[&p.prosumer].1 };
            let peak = net.get(&p.prosumer).map_or(0, |f| f.max_in(Timestep(0), Timestep::MAX));
            c.expect(peak <= lim, || format!("{}: peak {peak} mW > limit {lim} mW", p.prosumer));
        }
        out.push(c);
    }
    let mut c = CheckOutcome::new("group_bound");
    let n = art.private.prosumers.len();
    let mut rng = ChaCha20Rng::seed_from_u64(art.config.seed ^ 0x0067_726f_7570);
    for _ in 0..if n == 0 { 0 } else { GROUP_SUBSETS } {
        let mut members: Vec<&crate::sim::artifacts::ProsumerTruth> =
            art.private.prosumers.iter().filter(|_| rng.random_bool(0.5)).collect();
        if members.is_empty() {
            members.push(&art.private.prosumers[rng.random_range(0..n)]);
        }
        let mut sum = StepFunction::new();
        let mut cap = 0i128;
        for m in &members {
            cap += limits[&m.prosumer].0;
            if let Some(f) = epa.get(&m.prosumer) {
                for s in f.nonzero_segments() {
                    sum.add(s.start, s.end, s.value);
                }
            }
        }
        let peak = sum.max_in(Timestep(0), Timestep::MAX);
        c.expect(peak <= cap, || format!("group of {}: peak {peak} mW > {cap} mW", members.len()));
    }
    out.push(c);
    out
}

fn check_security(art: &RunArtifacts, ix: &Index) -> Vec<CheckOutcome> {
    let ledger = &art.ledger;
    let mut out = Vec::new();

    let mut c = CheckOutcome::new("conservation");
    match oracle::ledger_conserves(ledger) {
        Ok(n) => c.checked = n as u64,
        Err((seq, m)) => c.fail(|| format!("seq {seq}: {m}")),
    }
    out.push(c);

    out.push(check_billing(art));
    out.push(check_money(art, ix));

    // Every adversarial submission rejected; exactly one winner per race.
    let mut adv = CheckOutcome::new("adversarial_rejected");
    let mut races: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    let mut submitted: HashSet<u64> = HashSet::new();
    let mut delivered: HashSet<u64> = HashSet::new();
    for ev in &art.trace {
        match ev {
            TraceEvent::Submit { proposal, label: Label::Adversarial(_), .. } => {
                submitted.insert(*proposal);
            }
            TraceEvent::Outcome { proposal, tx, accepted, label, tick, .. } => {
                delivered.insert(*proposal);
                match label {
                    Label::Adversarial(kind) => adv.expect(!accepted, || format!("tick {tick}: {kind} tx {tx} accepted")),
                    Label::Race(g) => {
                        let e = races.entry(*g).or_default();
                        e.0 += 1;
                        e.1 += *accepted as u64;
                    }
                    Label::Honest => {}
                }
            }
            _ => {}
        }
    }
    // Submitted in the last ticks and never delivered: not recorded either.
    for _ in submitted.difference(&delivered) {
        adv.ok();
    }
    out.push(adv);
    let mut race = CheckOutcome::new("race_exactly_one");
    for (g, (n, won)) in &races {
        race.expect(*n < 2 || *won == 1, || format!("race {g}: {won} of {n} accepted"));
    }
    out.push(race);

    let mut board = CheckOutcome::new("board_consistency");
    for o in &art.orders {
        let spent = o.assets.iter().any(|r| ledger.is_spent(r));
        let ok = match o.status {
            OrderStatus::Open => !spent,
            OrderStatus::Consumed | OrderStatus::Stale => spent,
            OrderStatus::Withdrawn => true,
        };
        board.expect(ok, || format!("order {:?} is {:?} but spent={spent}", o.id, o.status));
    }
    out.push(board);

    let mut atomic = CheckOutcome::new("atomic_settlement");
    for t in &art.private.trades {
        let Some(Transaction::Eft(tx)) = entry_tx(ledger, &t.tx) else {
            atomic.fail(|| format!("trade {} not on the ledger", t.tx));
            continue;
        };
        let to = |kind: AssetKind, who: ProsumerId| {
            tx.outputs.iter().any(|(k, _, a, addr)| k == kind && ix.owner.get(&addr) == Some(&who) && !a.amount().is_some_and(|x| x.is_zero()))
        };
        let ok = to(AssetKind::Epa, t.buyer) && to(AssetKind::Eca, t.seller) && to(AssetKind::Fa, t.seller);
        atomic.expect(ok, || format!("trade {} does not swap EPA for ECA+FA", t.tx));
    }
    out.push(atomic);

    // Honest agents end with obligations met and nothing left at their
    // anonymous addresses.
    let mut obligations = CheckOutcome::new("honest_obligations");
    let mut stranded = CheckOutcome::new("deadline_soundness");
    let honest: HashSet<ProsumerId> =
        art.private.prosumers.iter().filter(|p| p.policy != crate::agents::Policy::ObligationDodger).map(|p| p.prosumer).collect();
    for p in &art.private.prosumers {
        if honest.contains(&p.prosumer) {
            obligations.expect(p.obligations_clear, || format!("{} has unmet obligations", p.prosumer));
        }
    }
    for (r, rec) in ledger.unspent() {
        if let Some(p) = ix.owner.get(&rec.address).filter(|p| honest.contains(p)) {
            stranded.fail(|| format!("{p} still holds {r}"));
        } else {
            stranded.ok();
        }
    }
    out.push(obligations);
    out.push(stranded);
    out
}

fn check_billing(art: &RunArtifacts) -> CheckOutcome {
    let mut c = CheckOutcome::new("billing_oracle");
    let mut measured: HashMap<ProsumerId, BTreeMap<Timestep, crate::fixed::NetPower>> = HashMap::new();
    for m in &art.measurements {
        measured.entry(m.prosumer).or_default().insert(m.t, m.net);
    }
    let mut bills: HashMap<(ProsumerId, Timestep), (crate::fixed::NetPower, crate::fixed::Money)> = HashMap::new();
    for b in &art.bills {
        bills.insert((b.prosumer, b.t), (b.e, b.b));
    }
    let empty = BTreeMap::new();
    for p in &art.private.prosumers {
        let deposits: HashSet<Address> = p.deposit_addresses.iter().copied().collect();
        let ms = measured.get(&p.prosumer).unwrap_or(&empty);
        let inp = oracle::BillingInputs { ledger: &art.ledger, meter: p.meter, deposit_addresses: &deposits, measurements: ms };
        for t in ms.keys() {
            let want = oracle::bill(&inp, *t);
            let got = bills.get(&(p.prosumer, *t)).copied();
            c.expect(want == got, || format!("{} t={}: meter {got:?} != oracle {want:?}", p.prosumer, t.0));
        }
    }
    c
}

/// FA side of all bills equals FA still held outside meter deposit
/// addresses: whatever was withdrawn and not deposited is still in
/// circulation.
fn check_money(art: &RunArtifacts, ix: &Index) -> CheckOutcome {
    let mut c = CheckOutcome::new("money_conservation");
    let ledger = &art.ledger;
    let mut minted = 0i128;
    let mut deposited = 0i128;
    for e in ledger.entries() {
        match &e.tx {
            Transaction::Smt(tx) => minted += tx.outputs.total_fa().0 as i128,
            Transaction::Eft(tx) => {
                for (_, _, a, addr) in tx.outputs.iter() {
                    if ix.deposit_owner.contains_key(&addr) {
                        deposited += a.amount().map_or(0, |x| x.0 as i128);
                    }
                }
            }
            Transaction::Rt(_) => {}
        }
    }
    let billed_fa = minted - deposited;
    let held: i128 = ledger
        .unspent()
        .iter()
        .filter(|(_, r)| !ix.deposit_owner.contains_key(&r.address))
        .filter_map(|(_, r)| r.asset.amount())
        .map(|a| a.0 as i128)
        .sum();
    // Bill lines: the FA part is B minus the energy term; recompute it from
    // E and the active prices.
    let mut from_bills = 0i128;
    for b in &art.bills {
        let prices = oracle::prices_at(ledger, b.t);
        let price = if b.e.0 < 0 { prices.production } else { prices.consumption };
        let energy = b.e.0 as i128 * price.0 as i128;
        from_bills += b.b.0 - energy;
    }
    let cents = from_bills / 100_000;
    c.expect(from_bills % 100_000 == 0 && cents == held && billed_fa == held, || {
        format!("bills carry {cents} cents of FA, ledger scan {billed_fa}, held outside meters {held}")
    });
    c
}

fn meter_results(art: &RunArtifacts) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    for ev in &art.trace {
        if let TraceEvent::Meter { result, .. } = ev {
            *out.entry(result.clone()).or_default() += 1;
        }
    }
    out
}

/// Observer tracing an output back to the meter that minted it: through a
/// multi-input transaction it follows its own linker guess, otherwise the
/// first input of the same kind.
fn trace_origin(ledger: &Ledger, start: OutputRef) -> Option<MeterId> {
    let mut r = start;
    for _ in 0..64 {
        match entry_tx(ledger, &r.tx)? {
            Transaction::Smt(tx) => return Some(tx.id),
            Transaction::Rt(_) => return None,
            Transaction::Eft(tx) => {
                let addr = ledger.output(&r)?.address;
                let guess = link_guess(ledger, tx);
                let next = guess
                    .iter()
                    .find(|(_, a)| *a == addr)
                    .map(|(i, _)| *i)
                    .or_else(|| tx.inputs().map(|i| i.out).find(|i| i.kind == r.kind))?;
                r = next;
            }
        }
    }
    None
}

fn check_privacy(art: &RunArtifacts, ix: &Index) -> PrivacyStats {
    let ledger = &art.ledger;
    let mut truth: HashMap<OutputRef, Address> = HashMap::new();
    for p in &art.private.prosumers {
        truth.extend(p.agent.links.iter().copied());
    }
    let mut by_tx: BTreeMap<TxId, HashMap<OutputRef, Address>> = BTreeMap::new();
    for (r, a) in &truth {
        if let Some(s) = ledger.spender(r) {
            by_tx.entry(s).or_default().insert(*r, *a);
        }
    }
    let (mut mix, mut base, mut hop) = (Vec::new(), Vec::new(), Vec::new());
    for (id, t) in &by_tx {
        let Some(Transaction::Eft(tx)) = entry_tx(ledger, id) else { continue };
        let guess: Vec<_> = link_guess(ledger, tx).into_iter().filter(|(i, _)| t.contains_key(i)).collect();
        let acc = link_accuracy(&guess, t);
        if tx.input_count() > 1 {
            mix.push(acc);
            base.push(1.0 / tx.input_count() as f64);
        } else {
            hop.push(acc);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let mut hits = 0usize;
    for t in &art.private.trades {
        let Some(Transaction::Eft(tx)) = entry_tx(ledger, &t.tx) else { continue };
        let seller = tx.epa_in.first().and_then(|i| trace_origin(ledger, i.out));
        let buyer = tx.eca_in.first().and_then(|i| trace_origin(ledger, i.out));
        let want = (ix.meter_of.get(&t.seller).copied(), ix.meter_of.get(&t.buyer).copied());
        if (seller, buyer) == want && seller.is_some() {
            hits += 1;
        }
    }
    let trades = art.private.trades.len();
    PrivacyStats {
        mix_rounds: mix.len(),
        mix_accuracy: mean(&mix),
        mix_baseline: mean(&base),
        hops: hop.len(),
        hop_accuracy: mean(&hop),
        trades,
        counterparty_accuracy: (trades > 0).then(|| hits as f64 / trades as f64),
    }
}
