//! Epoch timetable shared by agents and the harness.
//!
//! Every epoch runs the same sequence of stages, one ledger latency apart:
//! withdraw, split, mixing rounds (escrow, join, execute) or a single hop
//! when mixing is off, post orders, negotiate, and deposit. Assets traded
//! in an epoch cover the next epoch's window.

use serde::{Deserialize, Serialize};

use crate::fixed::{Amount, Power};
use crate::mixing::RoundId;
use crate::types::{Asset, AssetKind, Timestep};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Denominations {
    pub epa: Power,
    pub eca: Power,
    pub fa: Amount,
}

/// Units of each denomination every participating prosumer withdraws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bundle {
    pub epa_units: u32,
    pub eca_units: u32,
    pub fa_units: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Withdraw,
    Split,
    Escrow(u32),
    Join(u32),
    Execute(u32),
    Hop,
    Post,
    /// Second posting step, used by the zero-transfer proof.
    PostConfirm,
    Deposit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    pub index: u64,
    pub start: Timestep,
    pub latency: u64,
    pub mix_rounds: u32,
    pub delivery: (Timestep, Timestep),
    pub units: Denominations,
    /// Round ids per mixing round, EPA/ECA/FA, filled in as rounds open.
    pub rounds: Vec<[Option<RoundId>; 3]>,
}

/// Stages from the start of an epoch to its deposit stage, inclusive.
pub fn stages_needed(mix_rounds: u32) -> u64 {
    market_stage(mix_rounds) + 12
}

fn market_stage(mix_rounds: u32) -> u64 {
    if mix_rounds == 0 {
        3
    } else {
        2 + 3 * mix_rounds as u64
    }
}

impl EpochPlan {
    pub fn new(index: u64, start: Timestep, latency: u64, epoch_len: u64, mix_rounds: u32, units: Denominations) -> Self {
        let d0 = start.plus(epoch_len);
        EpochPlan {
            index,
            start,
            latency,
            mix_rounds,
            delivery: (d0, d0.plus(epoch_len - 1)),
            units,
            rounds: vec![[None; 3]; mix_rounds as usize],
        }
    }

    pub fn tick(&self, stage: u64) -> Timestep {
        self.start.plus(stage * self.latency)
    }

    fn stage_index(&self, s: Stage) -> u64 {
        let m = market_stage(self.mix_rounds);
        match s {
            Stage::Withdraw => 0,
            Stage::Split => 1,
            Stage::Escrow(r) => 2 + 3 * r as u64,
            Stage::Join(r) => 3 + 3 * r as u64,
            Stage::Execute(r) => 4 + 3 * r as u64,
            Stage::Hop => 2,
            Stage::Post => m,
            Stage::PostConfirm => m + 1,
            Stage::Deposit => m + 12,
        }
    }

    pub fn tick_of(&self, s: Stage) -> Timestep {
        self.tick(self.stage_index(s))
    }

    /// The stage scheduled exactly at `now`, if any.
    pub fn stage_at(&self, now: Timestep) -> Option<Stage> {
        let mut all = vec![Stage::Withdraw, Stage::Split];
        if self.mix_rounds == 0 {
            all.push(Stage::Hop);
        }
        for r in 0..self.mix_rounds {
            all.extend([Stage::Escrow(r), Stage::Join(r), Stage::Execute(r)]);
        }
        all.extend([Stage::Post, Stage::PostConfirm, Stage::Deposit]);
        all.into_iter().find(|s| self.tick_of(*s) == now)
    }

    /// Ticks during which buyers may open negotiations.
    pub fn propose_window(&self) -> (Timestep, Timestep) {
        let m = market_stage(self.mix_rounds);
        (self.tick(m + 2), self.tick(m + 8))
    }

    pub fn deposit_tick(&self) -> Timestep {
        self.tick_of(Stage::Deposit)
    }

    pub fn end(&self) -> Timestep {
        self.delivery.0.prev().unwrap_or(self.delivery.0)
    }

    pub fn unit(&self, kind: AssetKind) -> Asset {
        let (s, e) = (self.delivery.0 .0, self.delivery.1 .0);
        match kind {
            AssetKind::Epa => Asset::epa(self.units.epa, s, e),
            AssetKind::Eca => Asset::eca(self.units.eca, s, e),
            AssetKind::Fa => Asset::fa(self.units.fa),
        }
    }

    pub fn round(&self, r: u32, kind: AssetKind) -> Option<RoundId> {
        let i = match kind {
            AssetKind::Epa => 0,
            AssetKind::Eca => 1,
            AssetKind::Fa => 2,
        };
        self.rounds.get(r as usize).and_then(|x| x[i])
    }
}
