//! Brute-force recomputations used by the checkers. Nothing here calls
//! into the validator or the meter; everything is re-derived tick by tick
//! from raw ledger entries.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::fixed::{Money, NetPower};
use crate::ledger::Ledger;
use crate::transactions::{EnergyFinancialTx, LedgerView, Prices, Transaction};
use crate::types::{Address, Asset, AssetKind, MeterId, Timestep};

fn coverage_at(asset: &Asset, t: u64) -> i128 {
    match asset.energy() {
        Some(e) if e.start.0 <= t && t <= e.end.0 => e.power.0 as i128,
        _ => 0,
    }
}

/// Checks one EFT's conservation against the assets of its inputs: for
/// every timestep touched by any input or output, EPA and ECA coverage of
/// inputs equals that of outputs, and FA totals match. `input_assets`
/// must resolve every input.
pub fn eft_conserves(tx: &EnergyFinancialTx, input_assets: &[Asset]) -> Result<(), String> {
    let outputs: Vec<Asset> = tx.outputs.iter().map(|(_, _, a, _)| a).collect();
    let fa_in: u128 = input_assets.iter().filter_map(|a| a.amount()).map(|a| a.0 as u128).sum();
    let fa_out: u128 = outputs.iter().filter_map(|a| a.amount()).map(|a| a.0 as u128).sum();
    if fa_in != fa_out {
        return Err(format!("FA in {fa_in} != out {fa_out}"));
    }
    let mut ticks: Vec<u64> = Vec::new();
    for a in input_assets.iter().chain(&outputs) {
        if let Some(e) = a.energy() {
            ticks.push(e.start.0);
            ticks.push(e.end.0);
        }
    }
    let (Some(&lo), Some(&hi)) = (ticks.iter().min(), ticks.iter().max()) else { return Ok(()) };
    for kind in [AssetKind::Epa, AssetKind::Eca] {
        for t in lo..=hi {
            let sum = |v: &[Asset]| -> i128 { v.iter().filter(|a| a.kind() == kind).map(|a| coverage_at(a, t)).sum() };
            let (i, o) = (sum(input_assets), sum(&outputs));
            if i != o {
                return Err(format!("{} coverage at t={t}: in {i} != out {o}", kind.code()));
            }
        }
    }
    Ok(())
}

/// Every output ever created on the ledger, by reference.
pub fn all_outputs(ledger: &Ledger) -> HashMap<crate::transactions::OutputRef, (Asset, Address)> {
    let mut out = HashMap::new();
    for e in ledger.entries() {
        let id = e.tx.id();
        for (r, a, addr) in e.tx.created_outputs(id) {
            out.insert(r, (a, addr));
        }
    }
    out
}

/// Checks every recorded EFT for conservation and that no output is spent
/// twice. Returns the first failure with its sequence number.
pub fn ledger_conserves(ledger: &Ledger) -> Result<usize, (u64, String)> {
    let outputs = all_outputs(ledger);
    let mut spent = HashSet::new();
    let mut checked = 0;
    for e in ledger.entries() {
        let Transaction::Eft(tx) = &e.tx else { continue };
        let mut assets = Vec::new();
        for i in tx.inputs() {
            if !spent.insert(i.out) {
                return Err((e.seq, format!("{} spent twice", i.out)));
            }
            match outputs.get(&i.out) {
                Some((a, _)) => assets.push(*a),
                None => return Err((e.seq, format!("unknown input {}", i.out))),
            }
        }
        eft_conserves(tx, &assets).map_err(|m| (e.seq, m))?;
        checked += 1;
    }
    Ok(checked)
}

/// Prices at `t` by a full scan: the last recorded regulation with
/// `time < t`, else the genesis prices.
pub fn prices_at(ledger: &Ledger, t: Timestep) -> Prices {
    let mut p = ledger.genesis().initial_prices;
    for e in ledger.entries() {
        if let Transaction::Rt(rt) = &e.tx {
            if rt.time < t {
                p = Prices { consumption: rt.price_consumption, production: rt.price_production };
            }
        }
    }
    p
}

/// Inputs a billing recomputation needs for one meter.
pub struct BillingInputs<'a> {
    pub ledger: &'a Ledger,
    pub meter: MeterId,
    pub deposit_addresses: &'a HashSet<Address>,
    pub measurements: &'a BTreeMap<Timestep, NetPower>,
}

/// `(E, B)` for one timeslot, recomputed from scratch.
pub fn bill(inp: &BillingInputs, t: Timestep) -> Option<(NetPower, Money)> {
    let measured = *inp.measurements.get(&t)?;
    let mut epa_withdrawn = 0i128;
    let mut epa_deposited = 0i128;
    let mut fa_withdrawn = 0i128;
    let mut fa_deposited = 0i128;
    for e in inp.ledger.entries() {
        match &e.tx {
            Transaction::Smt(tx) if tx.id == inp.meter => {
                for (_, _, a, _) in tx.outputs.iter() {
                    epa_withdrawn += if a.kind() == AssetKind::Epa { coverage_at(&a, t.0) } else { 0 };
                    if e.timeslot == t {
                        fa_withdrawn += a.amount().map_or(0, |x| x.0 as i128);
                    }
                }
            }
            Transaction::Eft(tx) => {
                for (_, _, a, addr) in tx.outputs.iter() {
                    if !inp.deposit_addresses.contains(&addr) {
                        continue;
                    }
                    epa_deposited += if a.kind() == AssetKind::Epa { coverage_at(&a, t.0) } else { 0 };
                    if e.timeslot == t {
                        fa_deposited += a.amount().map_or(0, |x| x.0 as i128);
                    }
                }
            }
            _ => {}
        }
    }
    let e = measured.0 as i128 - epa_deposited + epa_withdrawn;
    let prices = prices_at(inp.ledger, t);
    // Money has 7 decimals: mW (3) x price (4); cents (2) need 5 more.
    let price = if e < 0 { prices.production } else { prices.consumption };
    let energy = e * price.0 as i128;
    let b = (fa_withdrawn - fa_deposited) * 100_000 + energy;
    Some((NetPower(e as i64), Money(b)))
}
