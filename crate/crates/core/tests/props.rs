mod common;

use std::collections::{HashMap, HashSet};

use common::{EftGen, Fx};
use gridtrade::crypto::KeyPair;
use gridtrade::fixed::{Amount, Power};
use gridtrade::ledger::ReplicatedLedger;
use gridtrade::meter::{Denial, MeterAccount, MeterLimits};
use gridtrade::sim::oracle;
use gridtrade::transactions::{OutputRef, Outputs, Transaction};
use gridtrade::types::{Address, Asset, AssetKind, MeterId, ProsumerId, Timestep};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn validator_balance_agrees_with_oracle(seed in any::<u64>()) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut g = EftGen::new(seed);
        let case = g.case(&mut rng);
        let verdict = g.fx.ledger.validate(&Transaction::Eft(case.tx.clone()), Timestep(100));
        let oracle = oracle::eft_conserves(&case.tx, &case.inputs);
        prop_assert_eq!(verdict.has("BALANCE_MISMATCH"), oracle.is_err(), "{} / {:?}", verdict, oracle);
        if !case.perturbed {
            prop_assert!(verdict.is_valid(), "{}", verdict);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn any_edit_after_signing_breaks_the_signature(seed in any::<u64>(), edit in 0usize..4) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut g = EftGen::new(seed);
        let mut tx = g.case(&mut rng).tx;
        let elsewhere = Address([9; 32]);
        match edit {
            0 => tx.nonce.0[0] ^= 1,
            1 => {
                if let Some(f) = tx.outputs.fa.first_mut() {
                    f.address = elsewhere;
                } else if let Some(e) = tx.outputs.epa.first_mut() {
                    e.address = elsewhere;
                } else {
                    tx.outputs.eca[0].address = elsewhere;
                }
            }
            2 => {
                tx.outputs.push(Asset::fa(Amount(0)), elsewhere);
            }
            _ => {
                if let Some(e) = tx.outputs.epa.first_mut() {
                    e.asset.power = Power(e.asset.power.0 + 1);
                } else if let Some(e) = tx.outputs.eca.first_mut() {
                    e.asset.power = Power(e.asset.power.0 + 1);
                } else {
                    tx.outputs.fa[0].asset.amount = Amount(tx.outputs.fa[0].asset.amount.0 + 1);
                }
            }
        }
        let verdict = g.fx.ledger.validate(&Transaction::Eft(tx), Timestep(100));
        prop_assert!(verdict.has("BAD_SIGNATURE"), "{}", verdict);
    }

    #[test]
    fn replicas_agree_under_random_schedules(
        seed in any::<u64>(),
        replicas in 2usize..6,
        latency in 1u64..4,
        spends in 1usize..25,
    ) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut fx = Fx::new(seed);
        let meter = fx.key();
        let wallet = fx.key();
        let mut rl = ReplicatedLedger::new(fx.genesis(), replicas, latency, seed);
        // The RT is recorded at tick `latency`, so that is its earliest time.
        rl.submit(fx.rt(&[(MeterId(0), &meter)], &[], common::GENESIS_PRICES, latency), Timestep(0));
        let coins: Vec<(Asset, Address)> = (1..=6).map(|i| (Asset::fa(Amount(i * 10)), wallet.address())).collect();
        let smt = fx.smt(MeterId(0), &meter, &coins);
        let refs = common::refs_in_order(&smt, &coins);
        rl.submit(smt, Timestep(latency));
        let t0 = 2 * latency;
        let mut schedule: HashMap<u64, Vec<Transaction>> = HashMap::new();
        let mut spent: HashSet<OutputRef> = HashSet::new();
        for _ in 0..spends {
            let i = rng.random_range(0..refs.len());
            spent.insert(refs[i]);
            let to = fx.key().address();
            let tx = fx.eft(&[(refs[i], &wallet)], &[(coins[i].0, to)]);
            schedule.entry(t0 + rng.random_range(0..8)).or_default().push(Transaction::Eft(tx));
        }
        let mut accepted = 0;
        for t in 0..t0 + 8 + latency + 1 {
            for tx in schedule.remove(&t).unwrap_or_default() {
                rl.submit(tx, Timestep(t));
            }
            let delivered = rl.deliver(Timestep(t)).expect("replicas agree on every verdict");
            accepted += delivered.iter().filter(|d| d.outcome.is_ok()).count();
        }
        prop_assert_eq!(rl.pending(), 0);
        prop_assert!(rl.in_agreement());
        // RT, SMT, then exactly one spend per coin that anyone tried to spend.
        prop_assert_eq!(accepted, 2 + spent.len());
        for r in rl.replicas() {
            prop_assert!(oracle::ledger_conserves(r.ledger()).is_ok());
        }
    }

    #[test]
    fn withdrawals_never_exceed_limits(
        requests in prop::collection::vec((any::<bool>(), 1u64..8, 1u64..10, 0u64..3), 1..30),
    ) {
        let max = 10;
        let mut fx = Fx::new(5);
        let mk = fx.key();
        fx.authorize(MeterId(0), &mk, 0);
        let limits = MeterLimits { max_epa: Power::units(max), max_eca: Power::units(max), credit_limit: Amount(0) };
        let mut meter = MeterAccount::new(MeterId(0), ProsumerId(0), mk, limits, 5);
        let wallet = fx.key().address();
        let mut issued: HashMap<(bool, u64), u64> = HashMap::new();
        for (epa, units, start, len) in requests {
            let end = start + len;
            let asset = if epa { Asset::epa(Power::units(units), start, end) } else { Asset::eca(Power::units(units), start, end) };
            let fits = (start..=end).all(|t| issued.get(&(epa, t)).copied().unwrap_or(0) + units <= max);
            let mut want = Outputs::default();
            want.push(asset, wallet);
            match meter.request_withdrawal(want, Timestep(1)) {
                Ok(smt) => {
                    prop_assert!(fits);
                    fx.ledger.append(Transaction::Smt(smt), Timestep(1)).unwrap();
                    meter.sync(&fx.ledger);
                    for t in start..=end {
                        *issued.entry((epa, t)).or_default() += units;
                    }
                }
                Err(Denial::LimitExceeded { kind, t }) => {
                    prop_assert!(!fits);
                    prop_assert_eq!(kind, if epa { AssetKind::Epa } else { AssetKind::Eca });
                    prop_assert!(issued.get(&(epa, t.0)).copied().unwrap_or(0) + units > max);
                }
                Err(other) => prop_assert!(false, "unexpected denial {:?}", other),
            }
            for t in 0..15 {
                for (kind, e) in [(AssetKind::Epa, true), (AssetKind::Eca, false)] {
                    let got = meter.issued(kind, Timestep(t));
                    prop_assert!(got <= Power::units(max));
                    prop_assert_eq!(got, Power::units(issued.get(&(e, t)).copied().unwrap_or(0)));
                }
            }
        }
    }
}

#[test]
fn generator_produces_both_outcomes() {
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut g = EftGen::new(0);
    let (mut ok, mut bad) = (0, 0);
    for _ in 0..300 {
        let case = g.case(&mut rng);
        match oracle::eft_conserves(&case.tx, &case.inputs) {
            Ok(()) => ok += 1,
            Err(_) => bad += 1,
        }
    }
    assert!(ok > 100 && bad > 100, "ok={ok} bad={bad}");
}

#[test]
fn key_from_seed_is_stable() {
    let k = KeyPair::from_seed([4; 32]);
    assert_eq!(KeyPair::from_seed(k.seed()).address(), k.address());
}
