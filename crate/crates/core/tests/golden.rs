use std::path::PathBuf;

use gridtrade::sim::config::ScenarioConfig;
use gridtrade::sim::experiments::{reconcile, transcript, TWO_PARTY};

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/two_party.txt")
}

/// Set GRIDTRADE_BLESS=1 to rewrite the expected transcript.
#[test]
fn two_party_transcript_matches_golden() {
    let run = gridtrade::sim::run(ScenarioConfig::from_toml(TWO_PARTY).unwrap());
    let got = transcript(&run);
    if std::env::var_os("GRIDTRADE_BLESS").is_some() {
        std::fs::write(golden_path(), &got).unwrap();
    }
    let want = std::fs::read_to_string(golden_path()).expect("golden transcript present");
    assert!(got == want, "transcript differs from {}:\n{got}", golden_path().display());
}

#[test]
fn two_party_settles_and_reconciles() {
    let run = gridtrade::sim::run(ScenarioConfig::from_toml(TWO_PARTY).unwrap());
    assert_eq!(run.private.trades.len(), 1);
    let rec = reconcile(&run);
    assert_eq!(rec.len(), 2);
    assert!(rec.iter().all(|r| r.obligations_clear));
    let (seller, buyer) = (rec[0], rec[1]);
    assert!(seller.fa_credit() > 0 && buyer.fa_credit() < 0, "{rec:?}");
    assert_eq!(seller.fa_credit() + buyer.fa_credit(), 0);
}
