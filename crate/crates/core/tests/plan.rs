use gridtrade::agents::plan::{stages_needed, Denominations, EpochPlan, Stage};
use gridtrade::fixed::{Amount, Power};
use gridtrade::types::{Asset, AssetKind, Timestep};

fn plan(mix_rounds: u32, latency: u64) -> EpochPlan {
    let units = Denominations { epa: Power::units(1), eca: Power::units(1), fa: Amount(100) };
    let len = (stages_needed(mix_rounds) + 2) * latency;
    EpochPlan::new(3, Timestep(3 * len), latency, len, mix_rounds, units)
}

fn stages(p: &EpochPlan) -> Vec<Stage> {
    let mut v = vec![Stage::Withdraw, Stage::Split];
    if p.mix_rounds == 0 {
        v.push(Stage::Hop);
    }
    for r in 0..p.mix_rounds {
        v.extend([Stage::Escrow(r), Stage::Join(r), Stage::Execute(r)]);
    }
    v.extend([Stage::Post, Stage::PostConfirm, Stage::Deposit]);
    v
}

#[test]
fn stage_ticks_increase_and_round_trip() {
    for rounds in 0..4 {
        for latency in [1, 2, 5] {
            let p = plan(rounds, latency);
            let ticks: Vec<Timestep> = stages(&p).iter().map(|s| p.tick_of(*s)).collect();
            assert!(ticks.windows(2).all(|w| w[0] < w[1]), "rounds={rounds} latency={latency}");
            for s in stages(&p) {
                assert_eq!(p.stage_at(p.tick_of(s)), Some(s));
            }
        }
    }
}

#[test]
fn deposit_lands_before_delivery() {
    for rounds in 0..4 {
        let p = plan(rounds, 3);
        assert_eq!(p.deposit_tick(), p.tick(stages_needed(rounds)));
        assert!(p.deposit_tick() < p.delivery.0);
        assert!(p.end() < p.delivery.0);
        let (open, close) = p.propose_window();
        assert!(p.tick_of(Stage::PostConfirm) < open && close < p.deposit_tick());
    }
}

#[test]
fn units_cover_the_next_window() {
    let p = plan(2, 1);
    let Asset::Epa(e) = p.unit(AssetKind::Epa) else { panic!("kind") };
    assert_eq!((e.start, e.end), p.delivery);
    assert_eq!(p.delivery.1 .0 - p.delivery.0 .0 + 1, p.delivery.0 .0 - p.start.0);
    assert_eq!(p.unit(AssetKind::Fa), Asset::fa(Amount(100)));
    assert_eq!(p.round(0, AssetKind::Eca), None);
}

#[test]
fn idle_ticks_have_no_stage() {
    let p = plan(1, 4);
    assert_eq!(p.stage_at(p.start.plus(1)), None);
}
