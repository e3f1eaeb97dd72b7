//! Stand-alone experiments: mix-round linkability, double-spend races,
//! the withdrawal-footprint classifier, price activation across a
//! regulation boundary, randomized scenarios and the two-party transcript.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::agents::Policy;
use crate::crypto::KeyPair;
use crate::dso::Dso;
use crate::fixed::{Amount, NetPower, Power, Price};
use crate::ledger::{Ledger, ReplicatedLedger};
use crate::meter::{MeterAccount, MeterLimits};
use crate::mixing::{link_accuracy, link_guess, DenominationPolicy, JoinRequest, MixParams, Mixer};
use crate::sim::artifacts::RunArtifacts;
use crate::sim::config::{ProsumerConfig, RegulationConfig, ScenarioConfig};
use crate::sim::oracle;
use crate::transactions::{EnergyFinancialTx, Genesis, OutputRef, Outputs, Prices, SmartMeterTx, Transaction};
use crate::types::{Address, Asset, AssetKind, MeterId, Nonce, ProsumerId, Timestep};

fn nonce(rng: &mut impl RngCore) -> Nonce {
    let mut n = Nonce::default();
    rng.fill_bytes(&mut n.0);
    n
}

fn prices(consumption: u64, production: u64) -> Prices {
    Prices { consumption: Price(consumption), production: Price(production) }
}

/// A single ledger with one authorized meter, for experiments that bypass
/// the tick runner.
struct Bench {
    rng: ChaCha20Rng,
    ledger: Ledger,
    meter_key: KeyPair,
    dso: Dso,
    now: Timestep,
}

impl Bench {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let dso = Dso::new(KeyPair::generate(&mut rng));
        let meter_key = KeyPair::generate(&mut rng);
        let mut ledger = Ledger::new(Genesis::new(dso.public_key(), prices(200, 100), 900));
        dso.regulate(&mut ledger, vec![(MeterId(0), meter_key.public())], vec![], prices(200, 100), Timestep(0), Timestep(0))
            .expect("initial regulation");
        Bench { rng, ledger, meter_key, dso, now: Timestep(1) }
    }

    fn key(&mut self) -> KeyPair {
        KeyPair::generate(&mut self.rng)
    }

    /// Mints `assets` to fresh keys and returns (output, key) per asset.
    fn mint(&mut self, assets: &[Asset]) -> Vec<(OutputRef, Asset, KeyPair)> {
        let keys: Vec<KeyPair> = assets.iter().map(|_| self.key()).collect();
        let mut outputs = Outputs::default();
        for (a, k) in assets.iter().zip(&keys) {
            outputs.push(*a, k.address());
        }
        let smt = SmartMeterTx::signed(outputs, MeterId(0), nonce(&mut self.rng), &self.meter_key);
        let tx = Transaction::Smt(smt);
        let id = tx.id();
        let created = tx.created_outputs(id);
        self.ledger.append(tx, self.now).expect("mint accepted");
        created.into_iter().zip(keys).map(|((r, a, _), k)| (r, a, k)).collect()
    }

    /// Pays one output in full to `to`.
    fn transfer(&mut self, input: OutputRef, asset: Asset, key: &KeyPair, to: Address) -> EnergyFinancialTx {
        let mut tx = EnergyFinancialTx::new(nonce(&mut self.rng));
        tx.add_input(input);
        tx.outputs.push(asset, to);
        tx.sign_input(&input, key);
        self.ledger.append(Transaction::Eft(tx.clone()), self.now).expect("transfer accepted");
        tx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkSetting {
    /// Every participant mixes the same denomination.
    EqualDenominations,
    /// Participants mix distinct amounts through a same-kind round.
    UnequalDenominations,
    /// No mixing: each participant moves its unit to a fresh address.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkStats {
    pub setting: LinkSetting,
    pub k: usize,
    pub rounds: usize,
    pub mean_accuracy: f64,
    pub baseline: f64,
}

/// Runs `rounds` rounds of `k` participants each and scores the ledger-only
/// linker against the true input-to-target map.
pub fn linkability(setting: LinkSetting, k: usize, rounds: usize, seed: u64) -> LinkStats {
    let mut bench = Bench::new(seed);
    let policy = match setting {
        LinkSetting::UnequalDenominations => DenominationPolicy::SameKind,
        _ => DenominationPolicy::Exact,
    };
    let mut mixer = Mixer::new(MixParams { k_min: k, deadline_ticks: 5, policy }, bench.rng.next_u64());
    let unit = Asset::fa(Amount(100));
    let mut total = 0.0;
    for _ in 0..rounds {
        let assets: Vec<Asset> = match setting {
            LinkSetting::UnequalDenominations => {
                let mut amounts: Vec<u64> = (1..=k as u64).map(|i| 100 * i).collect();
                amounts.shuffle(&mut bench.rng);
                amounts.into_iter().map(|a| Asset::fa(Amount(a))).collect()
            }
            _ => vec![unit; k],
        };
        let held = bench.mint(&assets);
        let mut truth = HashMap::new();
        let accuracy = if setting == LinkSetting::Disabled {
            let mut hits = 0.0;
            for (r, a, key) in held {
                let target = bench.key().address();
                let tx = bench.transfer(r, a, &key, target);
                let mut t = HashMap::new();
                t.insert(r, target);
                hits += link_accuracy(&link_guess(&bench.ledger, &tx), &t);
            }
            hits / k as f64
        } else {
            let round = mixer.open_round(unit, bench.now);
            for (r, a, key) in held {
                let ticket = mixer.escrow_ticket(round).expect("open round");
                let tx = bench.transfer(r, a, &key, ticket.address);
                let escrowed = OutputRef { tx: Transaction::Eft(tx).id(), kind: a.kind(), index: 0 };
                let target = bench.key().address();
                let refund = bench.key().address();
                mixer
                    .join_round(round, JoinRequest { input: escrowed, token: ticket.token, target, refund }, &bench.ledger, bench.now)
                    .expect("join");
                truth.insert(escrowed, target);
            }
            let (tx, _) = mixer.execute_round(round, bench.now).expect("full round settles");
            bench.ledger.append(Transaction::Eft(tx.clone()), bench.now).expect("settlement accepted");
            link_accuracy(&link_guess(&bench.ledger, &tx), &truth)
        };
        total += accuracy;
        bench.now = bench.now.plus(1);
    }
    LinkStats { setting, k, rounds, mean_accuracy: total / rounds.max(1) as f64, baseline: 1.0 / k as f64 }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaceStats {
    pub runs: usize,
    pub replicas: usize,
    /// Runs where exactly one settlement was recorded on every replica.
    pub exactly_one: usize,
    /// Runs won by the settlement submitted first.
    pub first_won: usize,
    pub replicas_agree: bool,
}

/// Two sellers each co-sign a settlement spending the same buyer ECA and FA
/// outputs; both are broadcast in the same tick.
pub fn double_spend_races(runs: usize, replicas: usize, seed: u64) -> RaceStats {
    let mut stats = RaceStats { runs, replicas, exactly_one: 0, first_won: 0, replicas_agree: true };
    for run in 0..runs {
        let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(run as u64));
        let dso = Dso::new(KeyPair::generate(&mut rng));
        let meter_key = KeyPair::generate(&mut rng);
        let genesis = Genesis::new(dso.public_key(), prices(200, 100), 900);
        let mut ledger = ReplicatedLedger::new(genesis, replicas, 1, rng.next_u64());
        let rt = dso
            .issue_regulation(vec![(MeterId(0), meter_key.public())], vec![], prices(200, 100), Timestep(1), Timestep(0))
            .expect("regulation");
        ledger.submit(Transaction::Rt(rt), Timestep(0));
        ledger.deliver(Timestep(1)).expect("agreement");

        let buyer = KeyPair::generate(&mut rng);
        let sellers = [KeyPair::generate(&mut rng), KeyPair::generate(&mut rng)];
        let energy = (Power(1000), 10, 19);
        let mut outputs = Outputs::default();
        outputs.push(Asset::eca(energy.0, energy.1, energy.2), buyer.address());
        outputs.push(Asset::fa(Amount(100)), buyer.address());
        for s in &sellers {
            outputs.push(Asset::epa(energy.0, energy.1, energy.2), s.address());
        }
        let smt = Transaction::Smt(SmartMeterTx::signed(outputs, MeterId(0), nonce(&mut rng), &meter_key));
        let minted = smt.created_outputs(smt.id());
        ledger.submit(smt, Timestep(1));
        ledger.deliver(Timestep(2)).expect("agreement");

        let find = |kind: AssetKind, addr: Address| {
            minted.iter().find(|(_, a, to)| a.kind() == kind && *to == addr).map(|(r, _, _)| *r).expect("minted")
        };
        let eca = find(AssetKind::Eca, buyer.address());
        let fa = find(AssetKind::Fa, buyer.address());
        let mut ids = Vec::new();
        for s in &sellers {
            let epa = find(AssetKind::Epa, s.address());
            let mut tx = EnergyFinancialTx::new(nonce(&mut rng));
            tx.add_input(epa);
            tx.add_input(eca);
            tx.add_input(fa);
            tx.outputs.push(Asset::epa(energy.0, energy.1, energy.2), buyer.address());
            tx.outputs.push(Asset::eca(energy.0, energy.1, energy.2), s.address());
            tx.outputs.push(Asset::fa(Amount(100)), s.address());
            tx.sign_input(&epa, s);
            tx.sign_input(&eca, &buyer);
            tx.sign_input(&fa, &buyer);
            let tx = Transaction::Eft(tx);
            ids.push(tx.id());
            ledger.submit(tx, Timestep(2));
        }
        if ledger.deliver(Timestep(3)).is_err() || !ledger.in_agreement() {
            stats.replicas_agree = false;
            continue;
        }
        let one_each = ledger.replicas().iter().all(|r| ids.iter().filter(|id| r.ledger().contains(id)).count() == 1);
        if one_each {
            stats.exactly_one += 1;
            if ledger.ledger().contains(&ids[0]) {
                stats.first_won += 1;
            }
        }
    }
    stats
}

/// Public withdrawal footprint of one meter: total withdrawn EPA and ECA
/// (watt-ticks) plus withdrawn FA (cents), read from smart-meter
/// transactions only.
pub fn withdrawal_footprints(ledger: &Ledger) -> BTreeMap<MeterId, u128> {
    let mut out = BTreeMap::new();
    for e in ledger.entries() {
        if let Transaction::Smt(tx) = &e.tx {
            let v = out.entry(tx.id).or_insert(0u128);
            for (_, _, a, _) in tx.outputs.iter() {
                *v += match a {
                    Asset::Fa(f) => f.amount.0 as u128,
                    Asset::Epa(x) | Asset::Eca(x) => x.power.0 as u128 * x.ticks() as u128,
                };
            }
        }
    }
    out
}

/// One classifier sample: a meter's footprint and whether its owner traded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    pub footprint: u128,
    pub trader: bool,
}

/// Threshold rule `footprint > threshold` (or `<=` when `inverted`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdRule {
    pub threshold: u128,
    pub inverted: bool,
}

impl ThresholdRule {
    pub fn predict(&self, footprint: u128) -> bool {
        (footprint > self.threshold) != self.inverted
    }

    pub fn accuracy(&self, samples: &[Sample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let hits = samples.iter().filter(|s| self.predict(s.footprint) == s.trader).count();
        hits as f64 / samples.len() as f64
    }

    /// Best rule on `samples` over every distinct footprint as threshold.
    pub fn fit(samples: &[Sample]) -> ThresholdRule {
        let mut candidates: Vec<u128> = samples.iter().map(|s| s.footprint).collect();
        candidates.push(0);
        candidates.sort_unstable();
        candidates.dedup();
        let mut best = (ThresholdRule { threshold: 0, inverted: false }, -1.0);
        for &threshold in &candidates {
            for inverted in [false, true] {
                let rule = ThresholdRule { threshold, inverted };
                let acc = rule.accuracy(samples);
                if acc > best.1 {
                    best = (rule, acc);
                }
            }
        }
        best.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintStats {
    pub discipline: bool,
    pub seeds: usize,
    pub rule: ThresholdRule,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Small market used by the footprint experiment: two sellers, two buyers
/// and four idle prosumers, so traders and non-traders are balanced.
pub fn footprint_scenario(seed: u64, discipline: bool) -> ScenarioConfig {
    let text = format!(
        r#"
seed = {seed}
ticks = 60
latency = 1
epoch_length = 20
[prices]
consumption = "0.02"
production = "0.01"
[denominations]
epa = "1"
eca = "1"
fa = "0.5"
[bundle]
epa_units = 1
eca_units = 1
fa_units = 1
[mixing]
k_min = 2
rounds = 1
deadline_ticks = 2
[discipline]
enabled = {discipline}
[[prosumers]]
policy = "seller"
price = "0.01"
max_epa = "2"
max_eca = "2"
credit_limit = "5"
count = 2
[[prosumers]]
policy = "buyer"
price = "0.015"
max_epa = "2"
max_eca = "2"
credit_limit = "5"
count = 2
[[prosumers]]
policy = "idle"
price = "0.01"
max_epa = "2"
max_eca = "2"
credit_limit = "5"
count = 4
"#
    );
    ScenarioConfig::from_toml(&text).expect("footprint scenario")
}

fn footprint_samples(seed: u64, discipline: bool) -> Vec<Sample> {
    let cfg = footprint_scenario(seed, discipline);
    let roster = cfg.roster();
    let run = crate::sim::run(cfg);
    let fp = withdrawal_footprints(&run.ledger);
    roster
        .iter()
        .enumerate()
        .map(|(i, p)| Sample { footprint: fp.get(&MeterId(i as u32)).copied().unwrap_or(0), trader: p.policy.trades() })
        .collect()
}

/// Trains a threshold classifier on the first half of the seeds and
/// reports its accuracy on the second half.
pub fn footprint_classifier(seeds: usize, discipline: bool, base_seed: u64) -> FootprintStats {
    let train_n = seeds / 2;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for i in 0..seeds {
        let s = footprint_samples(base_seed + i as u64, discipline);
        if i < train_n {
            train.extend(s);
        } else {
            test.extend(s);
        }
    }
    let rule = ThresholdRule::fit(&train);
    FootprintStats {
        discipline,
        seeds,
        rule,
        train_accuracy: rule.accuracy(&train),
        test_accuracy: rule.accuracy(&test),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriceActivation {
    pub rt_time: Timestep,
    /// Timesteps whose bill differs between the two ledgers.
    pub changed: Vec<Timestep>,
    /// Timesteps after `rt_time` with non-zero energy whose bill did not
    /// change.
    pub unchanged_after: Vec<Timestep>,
    /// Timesteps where the meter disagrees with the oracle.
    pub oracle_mismatches: Vec<Timestep>,
}

impl PriceActivation {
    pub fn holds(&self) -> bool {
        self.changed.iter().all(|t| *t > self.rt_time) && self.unchanged_after.is_empty() && self.oracle_mismatches.is_empty()
    }
}

/// Bills one meter over `horizon` timesteps before and after appending a
/// regulation with `time = rt_time` that changes both prices.
pub fn price_activation(rt_time: u64, horizon: u64, seed: u64) -> PriceActivation {
    let mut bench = Bench::new(seed);
    let key = bench.key();
    let mut meter = MeterAccount::new(
        MeterId(0),
        ProsumerId(0),
        key,
        MeterLimits { max_epa: Power(0), max_eca: Power(0), credit_limit: Amount(0) },
        bench.rng.next_u64(),
    );
    for t in 0..horizon {
        let net = bench.rng.random_range(-2000i64..=2000);
        meter.record_measurement(Timestep(t), NetPower(if net == 0 { 1 } else { net }));
    }
    let before: Vec<_> = (0..horizon).map(|t| meter.compute_bill(Timestep(t), &bench.ledger).expect("measured")).collect();
    let rt = bench
        .dso
        .issue_regulation(vec![], vec![], prices(500, 300), Timestep(rt_time), bench.now)
        .expect("regulation");
    bench.ledger.append(Transaction::Rt(rt), bench.now).expect("regulation accepted");
    let measurements: BTreeMap<Timestep, NetPower> = (0..horizon).filter_map(|t| Some((Timestep(t), meter.measurement(Timestep(t))?))).collect();
    let deposits = HashSet::new();
    let inputs = oracle::BillingInputs { ledger: &bench.ledger, meter: MeterId(0), deposit_addresses: &deposits, measurements: &measurements };
    let mut out = PriceActivation { rt_time: Timestep(rt_time), changed: vec![], unchanged_after: vec![], oracle_mismatches: vec![] };
    for t in 0..horizon {
        let ts = Timestep(t);
        let after = meter.compute_bill(ts, &bench.ledger).expect("measured");
        if after != before[t as usize] {
            out.changed.push(ts);
        } else if t > rt_time {
            out.unchanged_after.push(ts);
        }
        if oracle::bill(&inputs, ts).map(|(_, b)| b) != Some(after) {
            out.oracle_mismatches.push(ts);
        }
    }
    out
}

/// A random 20-prosumer scenario with every adversarial policy present.
pub fn random_scenario(seed: u64, ticks: u64) -> ScenarioConfig {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed);
    let mut cfg = ScenarioConfig::from_toml(&format!(
        "seed = {seed}\nticks = {ticks}\nepoch_length = 30\nreplicas = {}\n[prices]\nconsumption = \"0.02\"\nproduction = \"0.01\"\n\
         [denominations]\nepa = \"1\"\neca = \"1\"\nfa = \"0.5\"\n[bundle]\nepa_units = 1\neca_units = 1\nfa_units = 1\n\
         [mixing]\nk_min = {}\nrounds = 1\ndeadline_ticks = 2\n[measurements]\nnoise_mw = {}\n",
        rng.random_range(1..=4),
        rng.random_range(2..=8),
        rng.random_range(0..=200),
    ))
    .expect("base scenario");
    let adversaries =
        [Policy::OverWithdrawer, Policy::ObligationDodger, Policy::DoubleSpender, Policy::Forger, Policy::Spammer];
    let mut policies: Vec<Policy> = adversaries.to_vec();
    while policies.len() < 20 {
        policies.push(*[Policy::Seller, Policy::Buyer, Policy::Idle].get(rng.random_range(0..3)).expect("policy"));
    }
    policies.shuffle(&mut rng);
    cfg.prosumers = policies
        .into_iter()
        .map(|policy| {
            let max = Power(rng.random_range(1..=3) * 1000);
            ProsumerConfig {
                policy,
                price: Price(if policy.buys() { rng.random_range(120..=200) } else { rng.random_range(80..=150) }),
                units: 1,
                max_epa: max,
                max_eca: max,
                credit_limit: Amount(rng.random_range(100..=1000)),
                count: 1,
            }
        })
        .collect();
    if rng.random_bool(0.5) {
        cfg.regulations.push(RegulationConfig {
            time: rng.random_range(20..ticks.max(21)),
            consumption: Price(rng.random_range(150..=300)),
            production: Price(rng.random_range(50..=150)),
            ban: vec![],
        });
    }
    cfg.validate().expect("random scenario is valid");
    cfg
}

/// Two-party scenario: one seller, one buyer, mixing rounds of two.
pub const TWO_PARTY: &str = r#"seed = 1
ticks = 45
latency = 1
epoch_length = 30

[prices]
consumption = "0.02"
production = "0.01"

[denominations]
epa = "1"
eca = "1"
fa = "0.5"

[bundle]
epa_units = 1
eca_units = 1
fa_units = 1

[mixing]
k_min = 2
rounds = 1
deadline_ticks = 2

[[prosumers]]
policy = "seller"
price = "0.01"
max_epa = "1"
max_eca = "1"
credit_limit = "1"

[[prosumers]]
policy = "buyer"
price = "0.01"
max_epa = "1"
max_eca = "1"
credit_limit = "1"
"#;

/// Per-prosumer money reconciliation read back from a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reconciliation {
    pub prosumer: ProsumerId,
    pub obligations_clear: bool,
    pub fa_withdrawn: u64,
    pub fa_deposited: u64,
}

impl Reconciliation {
    /// Positive when the meter credited the prosumer.
    pub fn fa_credit(&self) -> i128 {
        self.fa_deposited as i128 - self.fa_withdrawn as i128
    }
}

pub fn reconcile(run: &RunArtifacts) -> Vec<Reconciliation> {
    run.private
        .prosumers
        .iter()
        .map(|p| {
            let deposit: HashSet<Address> = p.deposit_addresses.iter().copied().collect();
            let mut fa_withdrawn = 0;
            let mut fa_deposited = 0;
            for e in run.ledger.entries() {
                match &e.tx {
                    Transaction::Smt(tx) if tx.id == p.meter => fa_withdrawn += tx.outputs.total_fa().0,
                    Transaction::Eft(tx) => {
                        for (kind, _, a, addr) in tx.outputs.iter() {
                            if kind == AssetKind::Fa && deposit.contains(&addr) {
                                fa_deposited += a.amount().map_or(0, |x| x.0);
                            }
                        }
                    }
                    _ => {}
                }
            }
            Reconciliation { prosumer: p.prosumer, obligations_clear: p.obligations_clear, fa_withdrawn, fa_deposited }
        })
        .collect()
}

/// One line per ledger entry: sequence, timeslot, kind, short id, spent
/// inputs and created outputs.
pub fn ledger_listing(ledger: &Ledger) -> String {
    let mut s = String::new();
    for e in ledger.entries() {
        let tx = &e.tx;
        let outs = tx
            .outputs()
            .map(|o| o.iter().map(|(k, _, a, addr)| format!("{}:{}@{}", k.code(), asset_text(&a), addr.short())).collect::<Vec<_>>().join(" "))
            .unwrap_or_default();
        let ins = tx.spent_inputs().iter().map(|r| r.to_string()).collect::<Vec<_>>().join(" ");
        let _ = writeln!(s, "#{:<4} t={:<3} {} {} in[{}] out[{}]", e.seq, e.timeslot.0, tx.kind_code(), tx.id().short(), ins, outs);
    }
    s
}

/// Plain-text transcript of a run: every ledger entry, every trace event,
/// the trades and the final reconciliation.
pub fn transcript(run: &RunArtifacts) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "ledger {} entries {}", run.summary.ledger_hash, run.summary.entries);
    s.push_str(&ledger_listing(&run.ledger));
    for ev in &run.trace {
        let _ = writeln!(s, "{}", serde_json::to_string(ev).expect("serializable"));
    }
    for t in &run.private.trades {
        let _ = writeln!(
            s,
            "trade {} t={} {} -> {} {}W [{}..{}]",
            t.tx.short(),
            t.recorded_at.0,
            t.seller,
            t.buyer,
            t.energy.power,
            t.energy.start.0,
            t.energy.end.0
        );
    }
    for r in reconcile(run) {
        let _ = writeln!(
            s,
            "{} obligations_clear={} fa_withdrawn={} fa_deposited={} credit={}",
            r.prosumer, r.obligations_clear, r.fa_withdrawn, r.fa_deposited, r.fa_credit()
        );
    }
    s
}

pub fn asset_text(a: &Asset) -> String {
    match a {
        Asset::Fa(f) => f.amount.to_string(),
        Asset::Epa(e) | Asset::Eca(e) => format!("{}W[{}..{}]", e.power, e.start.0, e.end.0),
    }
}
