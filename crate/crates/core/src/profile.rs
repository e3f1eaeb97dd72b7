//! Piecewise-constant functions over timesteps.
//!
//! Interval assets contribute a constant power over `[start, end]`, so
//! every per-timestep sum in the protocol is a step function. Storing only
//! breakpoints keeps limit checks and balance checks independent of the
//! interval lengths involved.

use std::collections::BTreeMap;
use std::ops::Bound;

use crate::types::{EnergyAsset, Timestep};

/// A function `Timestep -> i128`, zero before the first breakpoint.
/// Each key holds the value from that timestep up to the next key.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StepFunction {
    points: BTreeMap<u64, i128>,
}

/// One maximal constant run: `value` on `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: Timestep,
    pub end: Timestep,
    pub value: i128,
}

impl StepFunction {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value_at(&self, t: Timestep) -> i128 {
        self.points.range(..=t.0).next_back().map(|(_, v)| *v).unwrap_or(0)
    }

    fn split_at(&mut self, x: u64) {
        if !self.points.contains_key(&x) {
            let v = self.value_at(Timestep(x));
            self.points.insert(x, v);
        }
    }

    /// Applies `f` to the value at every timestep of `[start, end]`.
    pub fn map_range(&mut self, start: Timestep, end: Timestep, mut f: impl FnMut(i128) -> i128) {
        debug_assert!(start <= end && end <= Timestep::MAX);
        self.split_at(start.0);
        self.split_at(end.0 + 1);
        for (_, v) in self.points.range_mut(start.0..=end.0) {
            *v = f(*v);
        }
        self.normalize_around(start.0, end.0 + 1);
    }

    pub fn add(&mut self, start: Timestep, end: Timestep, delta: i128) {
        if delta != 0 {
            self.map_range(start, end, |v| v + delta);
        }
    }

    pub fn add_asset(&mut self, asset: &EnergyAsset, sign: i128) {
        self.add(asset.start, asset.end, sign * asset.power.0 as i128);
    }

    fn normalize_around(&mut self, lo: u64, hi: u64) {
        let mut prev = self.points.range(..lo).next_back().map(|(_, v)| *v).unwrap_or(0);
        let keys: Vec<u64> = self.points.range(lo..=hi).map(|(k, _)| *k).collect();
        for k in keys {
            let v = self.points[&k];
            if v == prev {
                self.points.remove(&k);
            } else {
                prev = v;
            }
        }
    }

    /// Maximal constant runs within `[start, end]`, in order. Empty when
    /// `start > end`.
    pub fn segments_in(&self, start: Timestep, end: Timestep) -> Vec<Segment> {
        let mut out = Vec::new();
        if start > end {
            return out;
        }
        let mut cur_start = start.0;
        let mut cur_val = self.value_at(start);
        for (&k, &v) in self.points.range((Bound::Excluded(start.0), Bound::Included(end.0))) {
            out.push(Segment { start: Timestep(cur_start), end: Timestep(k - 1), value: cur_val });
            cur_start = k;
            cur_val = v;
        }
        out.push(Segment { start: Timestep(cur_start), end, value: cur_val });
        out
    }

    /// Runs with a non-zero value, across the whole domain.
    pub fn nonzero_segments(&self) -> Vec<Segment> {
        let mut out = Vec::new();
        let mut iter = self.points.iter().peekable();
        while let Some((&k, &v)) = iter.next() {
            if v == 0 {
                continue;
            }
            let end = match iter.peek() {
                Some((&next, _)) => next - 1,
                None => Timestep::MAX.0,
            };
            out.push(Segment { start: Timestep(k), end: Timestep(end), value: v });
        }
        out
    }

    pub fn max_in(&self, start: Timestep, end: Timestep) -> i128 {
        self.segments_in(start, end).iter().map(|s| s.value).max().unwrap_or(0)
    }

    /// First timestep in `[start, end]` whose value exceeds `limit`.
    pub fn first_above(&self, start: Timestep, end: Timestep, limit: i128) -> Option<Timestep> {
        self.segments_in(start, end).into_iter().find(|s| s.value > limit).map(|s| s.start)
    }

    /// First timestep strictly before `before` with a positive value.
    pub fn first_positive_before(&self, before: Timestep) -> Option<Timestep> {
        self.nonzero_segments()
            .into_iter()
            .find(|s| s.value > 0 && s.start < before)
            .map(|s| s.start)
    }

    pub fn is_zero(&self) -> bool {
        self.points.values().all(|v| *v == 0)
    }

    /// Subtracts `amount` on `[start, end]`, flooring each timestep at zero.
    /// Returns the unabsorbed excess as its own step function.
    pub fn subtract_floor(&mut self, start: Timestep, end: Timestep, amount: i128) -> StepFunction {
        let mut excess = StepFunction::new();
        for seg in self.segments_in(start, end) {
            let absorbed = seg.value.clamp(0, amount);
            excess.add(seg.start, seg.end, amount - absorbed);
        }
        self.map_range(start, end, |v| (v - amount).max(0));
        excess
    }
}
