mod common;

use common::{Fx, GENESIS_PRICES};
use gridtrade::fixed::{Amount, Power, Price};
use gridtrade::ledger::{Ledger, ReplicatedLedger};
use gridtrade::transactions::{active_prices, active_registry, MeterStatus, Prices, Transaction};
use gridtrade::types::{Asset, MeterId, Timestep};

fn w(n: u64) -> Power {
    Power::units(n)
}

fn meter_fx(seed: u64) -> (Fx, gridtrade::crypto::KeyPair) {
    let mut fx = Fx::new(seed);
    let mk = fx.key();
    fx.authorize(MeterId(1), &mk, 0);
    (fx, mk)
}

#[test]
fn split_preserves_per_timestep_sums() {
    let (mut fx, mk) = meter_fx(1);
    let a = fx.key();
    let r = fx.mint(MeterId(1), &mk, &[(Asset::epa(w(5), 0, 3), a.address())], 1)[0];
    let (b, c) = (fx.key(), fx.key());
    let tx = fx.eft(&[(r, &a)], &[(Asset::epa(w(2), 0, 3), b.address()), (Asset::epa(w(3), 0, 3), c.address())]);
    assert!(fx.append(tx, 1).is_ok());
}

#[test]
fn truncated_interval_is_a_balance_mismatch() {
    let (mut fx, mk) = meter_fx(2);
    let a = fx.key();
    let r = fx.mint(MeterId(1), &mk, &[(Asset::epa(w(5), 0, 3), a.address())], 1)[0];
    let tx = fx.eft(&[(r, &a)], &[(Asset::epa(w(5), 0, 2), a.address())]);
    let v = fx.ledger.validate(&Transaction::Eft(tx), Timestep(1));
    assert_eq!(v.codes(), vec!["BALANCE_MISMATCH"]);
    assert!(v.violations.iter().any(|x| x.to_string().contains("t=3")), "{v:?}");
}

#[test]
fn adjacent_intervals_merge() {
    let (mut fx, mk) = meter_fx(3);
    let a = fx.key();
    let refs = fx.mint(
        MeterId(1),
        &mk,
        &[(Asset::epa(w(4), 0, 1), a.address()), (Asset::epa(w(4), 2, 3), a.address())],
        1,
    );
    let tx = fx.eft(&[(refs[0], &a), (refs[1], &a)], &[(Asset::epa(w(4), 0, 3), a.address())]);
    assert!(fx.append(tx, 1).is_ok());
}

#[test]
fn second_spend_is_rejected() {
    let (mut fx, mk) = meter_fx(4);
    let a = fx.key();
    let r = fx.mint(MeterId(1), &mk, &[(Asset::fa(Amount(100)), a.address())], 1)[0];
    let b = fx.key();
    let first = fx.eft(&[(r, &a)], &[(Asset::fa(Amount(100)), b.address())]);
    let second = fx.eft(&[(r, &a)], &[(Asset::fa(Amount(100)), a.address())]);
    assert!(fx.append(first, 1).is_ok());
    assert_eq!(fx.append(second, 1).unwrap_err().codes(), vec!["DOUBLE_SPEND"]);
}

#[test]
fn fa_must_balance_and_inputs_must_exist() {
    let (mut fx, mk) = meter_fx(5);
    let a = fx.key();
    let r = fx.mint(MeterId(1), &mk, &[(Asset::fa(Amount(100)), a.address())], 1)[0];
    let tx = fx.eft(&[(r, &a)], &[(Asset::fa(Amount(101)), a.address())]);
    assert_eq!(fx.append(tx, 1).unwrap_err().codes(), vec!["BALANCE_MISMATCH"]);
    let mut bogus = r;
    bogus.index = 7;
    let tx = fx.eft(&[(bogus, &a)], &[(Asset::fa(Amount(100)), a.address())]);
    assert!(fx.append(tx, 1).unwrap_err().has("UNKNOWN_INPUT"));
}

#[test]
fn input_signed_by_wrong_key_is_rejected() {
    let (mut fx, mk) = meter_fx(6);
    let a = fx.key();
    let r = fx.mint(MeterId(1), &mk, &[(Asset::fa(Amount(100)), a.address())], 1)[0];
    let thief = fx.key();
    let tx = fx.eft(&[(r, &thief)], &[(Asset::fa(Amount(100)), thief.address())]);
    assert_eq!(fx.append(tx, 1).unwrap_err().codes(), vec!["BAD_SIGNATURE"]);
}

#[test]
fn smt_from_registered_meter_is_valid() {
    let (mut fx, mk) = meter_fx(7);
    let a = fx.key();
    let tx = fx.smt(MeterId(1), &mk, &[(Asset::epa(w(1), 2, 3), a.address())]);
    assert!(fx.ledger.validate(&tx, Timestep(1)).is_valid());
}

#[test]
fn smt_from_banned_meter_is_rejected() {
    let (mut fx, mk) = meter_fx(8);
    let ban = fx.rt(&[], &[MeterId(1)], GENESIS_PRICES, 5);
    fx.ledger.append(ban, Timestep(2)).unwrap();
    let a = fx.key();
    let tx = fx.smt(MeterId(1), &mk, &[(Asset::fa(Amount(1)), a.address())]);
    // Still authorized at t=5 (strictly-less rule); banned from t=6 on.
    assert!(fx.ledger.validate(&tx, Timestep(5)).is_valid());
    assert_eq!(fx.ledger.validate(&tx, Timestep(6)).codes(), vec!["BANNED_METER"]);
}

#[test]
fn smt_signed_by_other_meter_is_rejected() {
    let (mut fx, mk) = meter_fx(9);
    let other = fx.key();
    fx.authorize(MeterId(2), &other, 0);
    let a = fx.key();
    let tx = fx.smt(MeterId(1), &other, &[(Asset::fa(Amount(1)), a.address())]);
    assert_eq!(fx.ledger.validate(&tx, Timestep(1)).codes(), vec!["BAD_SIGNATURE"]);
    let unknown = fx.smt(MeterId(9), &mk, &[(Asset::fa(Amount(1)), a.address())]);
    assert_eq!(fx.ledger.validate(&unknown, Timestep(1)).codes(), vec!["UNKNOWN_METER"]);
}

#[test]
fn rt_time_must_not_be_in_the_past() {
    let fx = Fx::new(10);
    let now = fx.rt(&[], &[], GENESIS_PRICES, 4);
    assert!(fx.ledger.validate(&now, Timestep(4)).is_valid());
    let stale = fx.rt(&[], &[], GENESIS_PRICES, 3);
    assert_eq!(fx.ledger.validate(&stale, Timestep(4)).codes(), vec!["STALE_TIMESTEP"]);
}

#[test]
fn rt_with_forged_signature_is_rejected() {
    let mut fx = Fx::new(11);
    let impostor = Fx::new(12);
    let forged = impostor.rt(&[], &[], GENESIS_PRICES, 4);
    assert_eq!(fx.ledger.validate(&forged, Timestep(4)).codes(), vec!["BAD_SIGNATURE"]);
    let Transaction::Rt(mut tampered) = fx.rt(&[], &[], GENESIS_PRICES, 4) else { unreachable!() };
    tampered.price_consumption = Price(1);
    assert!(fx.ledger.append(Transaction::Rt(tampered), Timestep(4)).unwrap_err().has("BAD_SIGNATURE"));
}

#[test]
fn later_regulation_overrides_prices() {
    let mut fx = Fx::new(13);
    let pa = Prices { consumption: Price(1000), production: Price(500) };
    let pb = Prices { consumption: Price(3000), production: Price(700) };
    let a = fx.rt(&[], &[], pa, 5);
    let b = fx.rt(&[], &[], pb, 5);
    fx.ledger.append(a, Timestep(1)).unwrap();
    fx.ledger.append(b, Timestep(2)).unwrap();
    assert_eq!(active_prices(&fx.ledger, Timestep(6)), pb);
    assert_eq!(active_prices(&fx.ledger, Timestep(5)), GENESIS_PRICES);
    assert_eq!(fx.ledger.active_prices(Timestep(6)), pb);
}

#[test]
fn genesis_prices_without_regulation() {
    let fx = Fx::new(14);
    assert_eq!(active_prices(&fx.ledger, Timestep(1)), GENESIS_PRICES);
}

#[test]
fn registry_follows_ledger_order() {
    let mut fx = Fx::new(15);
    let k1 = fx.key();
    let auth = fx.rt(&[(MeterId(1), &k1)], &[], GENESIS_PRICES, 1);
    let ban = fx.rt(&[], &[MeterId(1)], GENESIS_PRICES, 1);
    fx.ledger.append(auth.clone(), Timestep(1)).unwrap();
    fx.ledger.append(ban.clone(), Timestep(1)).unwrap();
    assert_eq!(active_registry(&fx.ledger, Timestep(2)).get(&MeterId(1)), Some(&MeterStatus::Banned));

    let mut fx2 = Fx::new(15);
    fx2.ledger.append(ban, Timestep(1)).unwrap();
    fx2.ledger.append(auth, Timestep(1)).unwrap();
    assert_eq!(active_registry(&fx2.ledger, Timestep(2)).get(&MeterId(1)), Some(&MeterStatus::Authorized(k1.public())));

    let k2 = fx2.key();
    let rekey = fx2.rt(&[(MeterId(1), &k2)], &[], GENESIS_PRICES, 3);
    fx2.ledger.append(rekey, Timestep(2)).unwrap();
    assert_eq!(fx2.ledger.active_registry(Timestep(4)).get(&MeterId(1)), Some(&MeterStatus::Authorized(k2.public())));
    assert_eq!(fx2.ledger.active_registry(Timestep(3)).get(&MeterId(1)), Some(&MeterStatus::Authorized(k1.public())));
}

#[test]
fn query_unspent_tracks_spending() {
    let (mut fx, mk) = meter_fx(16);
    let a = fx.key();
    let r = fx.mint(MeterId(1), &mk, &[(Asset::epa(w(1), 2, 3), a.address())], 1)[0];
    assert_eq!(fx.ledger.query_unspent(&a.address()).len(), 1);
    let b = fx.key();
    let tx = fx.eft(&[(r, &a)], &[(Asset::epa(w(1), 2, 3), b.address())]);
    fx.append(tx, 1).unwrap();
    assert!(fx.ledger.query_unspent(&a.address()).is_empty());

    let refs = fx.mint(MeterId(1), &mk, &[(Asset::fa(Amount(5)), a.address()), (Asset::fa(Amount(7)), a.address())], 2);
    let tx = fx.eft(&[(refs[0], &a)], &[(Asset::fa(Amount(5)), b.address())]);
    fx.append(tx, 2).unwrap();
    let left = fx.ledger.query_unspent(&a.address());
    assert_eq!(left, vec![(refs[1], Asset::fa(Amount(7)))]);
}

#[test]
fn resubmission_is_a_duplicate() {
    let (mut fx, mk) = meter_fx(17);
    let a = fx.key();
    let tx = fx.smt(MeterId(1), &mk, &[(Asset::fa(Amount(1)), a.address())]);
    fx.ledger.append(tx.clone(), Timestep(1)).unwrap();
    assert!(fx.ledger.append(tx, Timestep(1)).unwrap_err().has("DUPLICATE"));
}

#[test]
fn timeslots_never_go_backwards() {
    let (mut fx, mk) = meter_fx(18);
    let a = fx.key();
    let tx = fx.smt(MeterId(1), &mk, &[(Asset::fa(Amount(1)), a.address())]);
    fx.ledger.append(tx, Timestep(5)).unwrap();
    let tx = fx.smt(MeterId(1), &mk, &[(Asset::fa(Amount(1)), a.address())]);
    assert!(fx.ledger.append(tx, Timestep(4)).unwrap_err().has("TIMESLOT_REGRESSION"));
}

fn busy_ledger(n: usize) -> Ledger {
    let (mut fx, mk) = meter_fx(19);
    let mut held = Vec::new();
    let mut now = 1;
    while fx.ledger.len() < n {
        if held.is_empty() || fx.ledger.len() % 3 == 0 {
            let a = fx.key();
            let r = fx.mint(MeterId(1), &mk, &[(Asset::fa(Amount(10)), a.address())], now)[0];
            held.push((r, a));
        } else {
            let (r, a) = held.pop().unwrap();
            let b = fx.key();
            let tx = fx.eft(&[(r, &a)], &[(Asset::fa(Amount(10)), b.address())]);
            let refs = fx.append(tx, now).unwrap();
            held.push((refs[0], b));
        }
        now += (fx.ledger.len() % 7 == 0) as u64;
    }
    fx.ledger
}

#[test]
fn snapshot_round_trip_preserves_state() {
    let ledger = busy_ledger(500);
    let back = Ledger::replay(&ledger.snapshot()).unwrap();
    assert_eq!(back.len(), 500);
    assert_eq!(back.state_hash(), ledger.state_hash());
}

#[test]
fn flipped_snapshot_byte_fails_replay() {
    let ledger = busy_ledger(60);
    let mut bytes = ledger.snapshot();
    let i = bytes.len() - 100;
    bytes[i] ^= 0x01;
    let err = Ledger::replay(&bytes).unwrap_err();
    assert_eq!(err.code(), "REPLAY_INVALID");
}

#[test]
fn empty_ledger_round_trip() {
    let fx = Fx::new(20);
    let back = Ledger::replay(&fx.ledger.snapshot()).unwrap();
    assert!(back.is_empty());
    assert_eq!(back.state_hash(), fx.ledger.state_hash());
    assert_eq!(back.genesis_hash(), fx.ledger.genesis_hash());
}

#[test]
fn entry_hashes_are_immutable() {
    let ledger = busy_ledger(120);
    let mut prefix = Ledger::new(gridtrade::transactions::LedgerView::genesis(&ledger).clone());
    let mut seen = Vec::new();
    for e in ledger.entries() {
        prefix.append(e.tx.clone(), e.timeslot).unwrap();
        seen.push(prefix.head_hash());
    }
    for (i, h) in seen.iter().enumerate() {
        assert_eq!(ledger.hash_at(i as u64), Some(*h));
    }
}

#[test]
fn replicas_see_the_same_smt() {
    let mut fx = Fx::new(21);
    let mk = fx.key();
    let mut rl = ReplicatedLedger::new(fx.genesis(), 3, 1, 5);
    rl.submit(fx.rt(&[(MeterId(1), &mk)], &[], GENESIS_PRICES, 1), Timestep(0));
    rl.deliver(Timestep(1)).unwrap();
    let a = fx.key();
    let smt = fx.smt(MeterId(1), &mk, &[(Asset::fa(Amount(3)), a.address())]);
    let id = smt.id();
    rl.submit(smt.clone(), Timestep(1));
    assert!(rl.deliver(Timestep(1)).unwrap().is_empty(), "latency not yet elapsed");
    let d = rl.deliver(Timestep(2)).unwrap();
    assert!(d[0].outcome.is_ok());
    assert!(rl.replicas().iter().all(|r| r.ledger().contains(&id)));
    rl.submit(smt, Timestep(2));
    let d = rl.deliver(Timestep(3)).unwrap();
    assert!(d[0].outcome.as_ref().unwrap_err().has("DUPLICATE"));
    assert!(rl.in_agreement());
}
