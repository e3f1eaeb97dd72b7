#![allow(dead_code)]

use gridtrade::crypto::KeyPair;
use gridtrade::fixed::Price;
use gridtrade::ledger::Ledger;
use gridtrade::transactions::{
    EnergyFinancialTx, Genesis, MeterAuthorization, OutputRef, Outputs, Prices, RegulatoryTx, SmartMeterTx, Transaction,
    ValidationVerdict,
};
use gridtrade::types::{Address, Asset, MeterId, Nonce, Timestep};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub const GENESIS_PRICES: Prices = Prices { consumption: Price(200), production: Price(100) };

/// A ledger with a known DSO key and helpers to build signed transactions.
pub struct Fx {
    pub rng: ChaCha20Rng,
    pub dso: KeyPair,
    pub ledger: Ledger,
}

impl Fx {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let dso = KeyPair::generate(&mut rng);
        let ledger = Ledger::new(Genesis::new(dso.public(), GENESIS_PRICES, 900));
        Fx { rng, dso, ledger }
    }

    pub fn genesis(&self) -> Genesis {
        gridtrade::transactions::LedgerView::genesis(&self.ledger).clone()
    }

    pub fn key(&mut self) -> KeyPair {
        KeyPair::generate(&mut self.rng)
    }

    pub fn nonce(&mut self) -> Nonce {
        let mut n = Nonce::default();
        self.rng.fill_bytes(&mut n.0);
        n
    }

    pub fn rt(&self, authorize: &[(MeterId, &KeyPair)], ban: &[MeterId], prices: Prices, time: u64) -> Transaction {
        let auth = authorize.iter().map(|(id, k)| MeterAuthorization { id: *id, pubkey: k.public() }).collect();
        Transaction::Rt(RegulatoryTx::signed(auth, ban.to_vec(), prices, Timestep(time), &self.dso))
    }

    /// Records an RT authorizing `meter` with `time = now`.
    pub fn authorize(&mut self, meter: MeterId, key: &KeyPair, now: u64) {
        let tx = self.rt(&[(meter, key)], &[], GENESIS_PRICES, now);
        self.ledger.append(tx, Timestep(now)).expect("authorization recorded");
    }

    pub fn smt(&mut self, meter: MeterId, key: &KeyPair, outputs: &[(Asset, Address)]) -> Transaction {
        let mut o = Outputs::default();
        for (a, addr) in outputs {
            o.push(*a, *addr);
        }
        Transaction::Smt(SmartMeterTx::signed(o, meter, self.nonce(), key))
    }

    /// Appends an SMT and returns references to its outputs in the order
    /// given.
    pub fn mint(&mut self, meter: MeterId, key: &KeyPair, outputs: &[(Asset, Address)], now: u64) -> Vec<OutputRef> {
        let tx = self.smt(meter, key, outputs);
        let refs = refs_in_order(&tx, outputs);
        self.ledger.append(tx, Timestep(now)).expect("mint recorded");
        refs
    }

    /// A signed EFT spending `inputs` into `outputs`.
    pub fn eft(&mut self, inputs: &[(OutputRef, &KeyPair)], outputs: &[(Asset, Address)]) -> EnergyFinancialTx {
        let mut tx = EnergyFinancialTx::new(self.nonce());
        for (r, _) in inputs {
            tx.add_input(*r);
        }
        for (a, addr) in outputs {
            tx.outputs.push(*a, *addr);
        }
        for (r, k) in inputs {
            assert!(tx.sign_input(r, k));
        }
        tx
    }

    pub fn append(&mut self, tx: EnergyFinancialTx, now: u64) -> Result<Vec<OutputRef>, ValidationVerdict> {
        let wanted: Vec<(Asset, Address)> = tx.outputs.iter().map(|(_, _, a, addr)| (a, addr)).collect();
        let t = Transaction::Eft(tx);
        let refs = refs_in_order(&t, &wanted);
        self.ledger.append(t, Timestep(now))?;
        Ok(refs)
    }
}

/// Output references of `tx` matched to `outputs` by position within kind.
pub fn refs_in_order(tx: &Transaction, outputs: &[(Asset, Address)]) -> Vec<OutputRef> {
    let id = tx.id();
    let mut counters = std::collections::HashMap::new();
    outputs
        .iter()
        .map(|(a, _)| {
            let n = counters.entry(a.kind()).or_insert(0u32);
            let r = OutputRef { tx: id, kind: a.kind(), index: *n };
            *n += 1;
            r
        })
        .collect()
}

/// A random EFT over freshly minted inputs. About half the cases are
/// balanced by construction; the rest get one perturbation that may or may
/// not break conservation.
pub struct EftCase {
    pub tx: EnergyFinancialTx,
    pub inputs: Vec<Asset>,
    pub perturbed: bool,
}

pub struct EftGen {
    pub fx: Fx,
    meter: KeyPair,
    wallet: KeyPair,
    now: u64,
}

impl EftGen {
    pub fn new(seed: u64) -> Self {
        let mut fx = Fx::new(seed);
        let meter = fx.key();
        fx.authorize(MeterId(0), &meter, 0);
        let wallet = fx.key();
        EftGen { fx, meter, wallet, now: 1 }
    }

    pub fn case(&mut self, rng: &mut impl Rng) -> EftCase {
        let inputs: Vec<Asset> = (0..rng.random_range(1..=3)).map(|_| random_asset(rng)).collect();
        let to = self.wallet.address();
        let pairs: Vec<(Asset, Address)> = inputs.iter().map(|a| (*a, to)).collect();
        let refs = self.fx.mint(MeterId(0), &KeyPair::from_seed(self.meter.seed()), &pairs, self.now);
        self.now += 1;

        let mut outs = balanced_outputs(&inputs, rng);
        let perturbed = rng.random_bool(0.5);
        if perturbed {
            perturb(&mut outs, rng);
        }
        let wallet = KeyPair::from_seed(self.wallet.seed());
        let signers: Vec<(OutputRef, &KeyPair)> = refs.iter().map(|r| (*r, &wallet)).collect();
        let with_addr: Vec<(Asset, Address)> = outs.into_iter().map(|a| (a, self.fx.key().address())).collect();
        let tx = self.fx.eft(&signers, &with_addr);
        EftCase { tx, inputs, perturbed }
    }
}

fn random_asset(rng: &mut impl Rng) -> Asset {
    let power = gridtrade::fixed::Power(rng.random_range(1..=20) * 1000 + rng.random_range(0..3) * 250);
    let start = rng.random_range(0..10);
    let end = start + rng.random_range(0..5);
    match rng.random_range(0..3) {
        0 => Asset::epa(power, start, end),
        1 => Asset::eca(power, start, end),
        _ => Asset::fa(gridtrade::fixed::Amount(rng.random_range(1..500))),
    }
}

fn with_power(a: &Asset, power: u64, start: u64, end: u64) -> Asset {
    let p = gridtrade::fixed::Power(power);
    match a {
        Asset::Epa(_) => Asset::epa(p, start, end),
        _ => Asset::eca(p, start, end),
    }
}

/// Outputs conserving `inputs`: each input passed through or split in power
/// or in time, or every energy input of a kind re-cut into the constant
/// runs of its summed coverage.
fn balanced_outputs(inputs: &[Asset], rng: &mut impl Rng) -> Vec<Asset> {
    let mut out = Vec::new();
    let recut = rng.random_bool(0.3);
    for a in inputs {
        match a {
            Asset::Fa(f) if f.amount.0 >= 2 && rng.random_bool(0.5) => {
                let x = rng.random_range(1..f.amount.0);
                out.push(Asset::fa(gridtrade::fixed::Amount(x)));
                out.push(Asset::fa(gridtrade::fixed::Amount(f.amount.0 - x)));
            }
            Asset::Fa(_) => out.push(*a),
            _ if recut => {}
            Asset::Epa(e) | Asset::Eca(e) => match rng.random_range(0..3) {
                1 if e.power.0 >= 2 => {
                    let x = rng.random_range(1..e.power.0);
                    out.push(with_power(a, x, e.start.0, e.end.0));
                    out.push(with_power(a, e.power.0 - x, e.start.0, e.end.0));
                }
                2 if e.end > e.start => {
                    let c = rng.random_range(e.start.0..e.end.0);
                    out.push(with_power(a, e.power.0, e.start.0, c));
                    out.push(with_power(a, e.power.0, c + 1, e.end.0));
                }
                _ => out.push(*a),
            },
        }
    }
    if recut {
        for kind in [gridtrade::types::AssetKind::Epa, gridtrade::types::AssetKind::Eca] {
            let template = if kind == gridtrade::types::AssetKind::Epa {
                Asset::epa(gridtrade::fixed::Power(1), 0, 0)
            } else {
                Asset::eca(gridtrade::fixed::Power(1), 0, 0)
            };
            let total = |t: u64| -> u64 {
                inputs
                    .iter()
                    .filter(|a| a.kind() == kind)
                    .filter_map(|a| a.energy())
                    .filter(|e| e.start.0 <= t && t <= e.end.0)
                    .map(|e| e.power.0)
                    .sum()
            };
            let mut run: Option<(u64, u64, u64)> = None;
            for t in 0..=15 {
                let v = total(t);
                match run {
                    Some((s, e, p)) if p == v && e + 1 == t => run = Some((s, t, p)),
                    _ => {
                        if let Some((s, e, p)) = run.take() {
                            out.push(with_power(&template, p, s, e));
                        }
                        if v > 0 {
                            run = Some((t, t, v));
                        }
                    }
                }
            }
            if let Some((s, e, p)) = run {
                out.push(with_power(&template, p, s, e));
            }
        }
    }
    out.shuffle(rng);
    out
}

fn perturb(outs: &mut Vec<Asset>, rng: &mut impl Rng) {
    let i = rng.random_range(0..outs.len());
    match (rng.random_range(0..5), outs[i]) {
        (0, Asset::Epa(e) | Asset::Eca(e)) => outs[i] = with_power(&outs[i], e.power.0 + 1, e.start.0, e.end.0),
        (1, Asset::Epa(e) | Asset::Eca(e)) => outs[i] = with_power(&outs[i], e.power.0, e.start.0, e.end.0 + 1),
        (2, Asset::Epa(e)) => outs[i] = Asset::eca(e.power, e.start.0, e.end.0),
        (2, Asset::Eca(e)) => outs[i] = Asset::epa(e.power, e.start.0, e.end.0),
        (3, _) if outs.len() >= 2 => {
            outs.remove(i);
        }
        (_, Asset::Fa(f)) => outs[i] = Asset::fa(gridtrade::fixed::Amount(f.amount.0 + 1)),
        _ => outs.push(Asset::fa(gridtrade::fixed::Amount(1))),
    }
}
