//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Run with `cargo test --test acceptance`.

mod common;

use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::EftGen;
use gridtrade::ledger::Ledger;
use gridtrade::sim::check::check;
use gridtrade::sim::config::ScenarioConfig;
use gridtrade::sim::experiments::{self, LinkSetting, TWO_PARTY};
use gridtrade::sim::oracle;
use gridtrade::transactions::Transaction;
use gridtrade::types::Timestep;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn balance_soundness() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let mut g = EftGen::new(1);
    let (mut accepted, mut rejected, mut bad) = (0, 0, Vec::new());
    for i in 0..1000 {
        let case = g.case(&mut rng);
        let conserves = oracle::eft_conserves(&case.tx, &case.inputs);
        let now = Timestep(g.fx.ledger.last_timeslot().map_or(0, |t| t.0));
        match g.fx.ledger.append(Transaction::Eft(case.tx), now) {
            Ok(_) if conserves.is_err() => bad.push(format!("case {i} accepted: {}", conserves.unwrap_err())),
            Ok(_) => accepted += 1,
            Err(v) if conserves.is_ok() => bad.push(format!("case {i} rejected: {v}")),
            Err(v) if !v.has("BALANCE_MISMATCH") => bad.push(format!("case {i} wrong verdict: {v}")),
            Err(_) => rejected += 1,
        }
    }
    let ledger_ok = oracle::ledger_conserves(&g.fx.ledger).is_ok();
    let took = start.elapsed();
    let passed = bad.is_empty() && ledger_ok && accepted >= 100 && took < Duration::from_secs(10);
    let first = bad.first().map(|s| format!(" first: {s}")).unwrap_or_default();
    verdict(passed, format!("1000 txs, {accepted} accepted, {rejected} rejected, {} disagreements, {took:.2?}{first}", bad.len()))
}

struct ScenarioSweep {
    safety: Verdict,
    billing: Verdict,
}

fn scenario_sweep() -> ScenarioSweep {
    let (mut safety_bad, mut billing_bad) = (Vec::new(), Vec::new());
    let (mut bounds_checked, mut lines_checked) = (0, 0);
    for seed in 0..20 {
        let report = check(&gridtrade::sim::run(experiments::random_scenario(seed, 200)));
        for name in ["net_sold_bound", "net_bought_bound", "group_bound"] {
            let c = report.check(name).expect("check present");
            bounds_checked += c.checked;
            if !c.passed {
                safety_bad.push(format!("seed {seed} {name}: {}", c.first.clone().unwrap_or_default()));
            }
        }
        let c = report.check("billing_oracle").expect("check present");
        lines_checked += c.checked;
        if !c.passed {
            billing_bad.push(format!("seed {seed}: {}", c.first.clone().unwrap_or_default()));
        }
    }
    let first = |v: &[String]| v.first().map(|s| format!(" first: {s}")).unwrap_or_default();
    ScenarioSweep {
        safety: verdict(
            safety_bad.is_empty(),
            format!("20 runs x 200 ticks, {bounds_checked} bounds checked, {} violations{}", safety_bad.len(), first(&safety_bad)),
        ),
        billing: verdict(
            billing_bad.is_empty() && lines_checked > 0,
            format!("{lines_checked} (prosumer, t) lines checked, {} runs with mismatches{}", billing_bad.len(), first(&billing_bad)),
        ),
    }
}

fn double_spend() -> Verdict {
    let r = experiments::double_spend_races(100, 4, 1);
    verdict(
        r.exactly_one == r.runs && r.replicas_agree,
        format!("{}/{} races with exactly one settlement on all {} replicas", r.exactly_one, r.runs, r.replicas),
    )
}

fn price_activation() -> Verdict {
    let p = experiments::price_activation(15, 30, 3);
    let first = p.changed.first().map(|t| t.to_string()).unwrap_or_else(|| "none".into());
    verdict(p.holds(), format!("rt time {}, first changed bill at {first}, {} oracle mismatches", p.rt_time, p.oracle_mismatches.len()))
}

fn unlinkability() -> Verdict {
    let start = Instant::now();
    let mixed = experiments::linkability(LinkSetting::EqualDenominations, 8, 200, 1);
    let open = experiments::linkability(LinkSetting::Disabled, 8, 200, 1);
    let took = start.elapsed();
    let passed = (0.075..=0.175).contains(&mixed.mean_accuracy) && open.mean_accuracy == 1.0 && took < Duration::from_secs(60);
    verdict(passed, format!("k=8 accuracy {:.3}, disabled {:.3}, {took:.2?}", mixed.mean_accuracy, open.mean_accuracy))
}

fn privacy_discipline() -> Verdict {
    let on = experiments::footprint_classifier(50, true, 1);
    let off = experiments::footprint_classifier(50, false, 1);
    verdict(
        on.test_accuracy <= 0.55 && off.test_accuracy >= 0.9,
        format!("held-out accuracy {:.3} with discipline, {:.3} without", on.test_accuracy, off.test_accuracy),
    )
}

fn run_in_subprocess(cfg: &std::path::Path, out: &std::path::Path) -> Option<String> {
    let o = Command::new(env!("CARGO_BIN_EXE_gridtrade"))
        .args(["run", cfg.to_str()?, "--out", out.to_str()?])
        .output()
        .ok()?;
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).ok()?;
    summary["ledger_hash"].as_str().map(str::to_owned)
}

fn determinism() -> Verdict {
    let cfg = experiments::random_scenario(8, 200);
    let (a, b) = (gridtrade::sim::run(cfg.clone()), gridtrade::sim::run(cfg.clone()));
    let same = a.summary.ledger_hash == b.summary.ledger_hash && a.ledger.snapshot() == b.ledger.snapshot();

    let tmp = tempfile::tempdir().expect("tempdir");
    let path = tmp.path().join("scenario.toml");
    std::fs::write(&path, cfg.to_toml()).expect("write config");
    let p1 = run_in_subprocess(&path, &tmp.path().join("a"));
    let p2 = run_in_subprocess(&path, &tmp.path().join("b"));
    let cross = p1.is_some() && p1 == p2 && p1.as_deref() == Some(a.summary.ledger_hash.as_str());

    let bytes = a.ledger.snapshot();
    let replayed = Ledger::replay(&bytes).map(|l| l.state_hash() == a.ledger.state_hash()).unwrap_or(false);
    let mut flipped = 0;
    let positions = [0, bytes.len() / 3, bytes.len() / 2, bytes.len() - 1];
    for &i in &positions {
        let mut t = bytes.clone();
        t[i] ^= 0x01;
        if Ledger::replay(&t).is_err_and(|e| e.to_string().contains("REPLAY_INVALID")) {
            flipped += 1;
        }
    }
    verdict(
        same && cross && replayed && flipped == positions.len(),
        format!(
            "in-process {same}, across processes {cross}, replay {replayed} ({} entries), {flipped}/{} flipped bytes rejected",
            a.ledger.len(),
            positions.len()
        ),
    )
}

fn golden_workflow() -> Verdict {
    let run = gridtrade::sim::run(ScenarioConfig::from_toml(TWO_PARTY).expect("two-party config"));
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/two_party.txt");
    let matches = std::fs::read_to_string(&path).is_ok_and(|g| g == experiments::transcript(&run));
    let rec = experiments::reconcile(&run);
    let clear = rec.iter().all(|r| r.obligations_clear);
    let credited = rec.len() == 2 && rec[0].fa_credit() > 0 && rec[0].fa_credit() + rec[1].fa_credit() == 0;
    verdict(
        run.private.trades.len() == 1 && matches && clear && credited,
        format!(
            "{} trade, transcript {}, obligations clear {clear}, seller credit {}",
            run.private.trades.len(),
            if matches { "matches" } else { "DIFFERS" },
            rec.first().map_or(0, |r| r.fa_credit())
        ),
    )
}

fn main() -> ExitCode {
    let sweep = scenario_sweep();
    let results = [
        ("1 balance soundness", balance_soundness()),
        ("2 safety bound", sweep.safety),
        ("3 billing oracle", sweep.billing),
        ("4 double spend", double_spend()),
        ("5 price activation", price_activation()),
        ("6 unlinkability", unlinkability()),
        ("7 privacy discipline", privacy_discipline()),
        ("8 determinism and replay", determinism()),
        ("9 two-party workflow", golden_workflow()),
    ];
    let mut failed = 0;
    for (name, v) in &results {
        println!("{} {name:<26} {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.passed);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
