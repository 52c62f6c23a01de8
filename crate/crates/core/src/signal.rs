//! Ring-and-barrier signal timing.
//!
//! Phases 1–8 use the fixed dual-ring assignment ring 1 = {1,2,3,4},
//! ring 2 = {5,6,7,8}. The barrier separates the coordinated group
//! {1,2,5,6} (major street) from {3,4,7,8} (minor street). Within each
//! ring-group the left-turn phase leads.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Approach, Movement};
use crate::error::{Error, Result};

pub const NUM_PHASES: usize = 8;

/// Ring-group phase pairs `[(ring 1), (ring 2)]` for each barrier group.
pub const BARRIER_GROUPS: [[(usize, usize); 2]; 2] = [[(1, 2), (5, 6)], [(3, 4), (7, 8)]];

/// NEMA phase governing a movement from an approach. Right turns run with
/// the through phase.
pub fn governing_phase(approach: Approach, movement: Movement) -> usize {
    use Approach::*;
    match (approach, movement) {
        (WB, Movement::Left) => 1,
        (EB, Movement::Through | Movement::Right) => 2,
        (SB, Movement::Left) => 3,
        (NB, Movement::Through | Movement::Right) => 4,
        (EB, Movement::Left) => 5,
        (WB, Movement::Through | Movement::Right) => 6,
        (NB, Movement::Left) => 7,
        (SB, Movement::Through | Movement::Right) => 8,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseLimits {
    pub min_green_s: u32,
    pub max_green_s: u32,
    pub yellow_s: u32,
    pub all_red_s: u32,
}

impl PhaseLimits {
    fn clearance(&self) -> u32 {
        self.yellow_s + self.all_red_s
    }
}

/// Field limits plus the cycle-length sampling range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalConstraints {
    pub cycle_min_s: u32,
    pub cycle_max_s: u32,
    /// Indexed by phase number minus one.
    pub phases: [PhaseLimits; NUM_PHASES],
}

impl Default for SignalConstraints {
    fn default() -> Self {
        let left = PhaseLimits {
            min_green_s: 7,
            max_green_s: 30,
            yellow_s: 4,
            all_red_s: 2,
        };
        let major = PhaseLimits {
            min_green_s: 15,
            max_green_s: 100,
            ..left
        };
        let minor = PhaseLimits {
            min_green_s: 10,
            max_green_s: 70,
            ..left
        };
        SignalConstraints {
            cycle_min_s: 120,
            cycle_max_s: 240,
            phases: [left, major, left, minor, left, major, left, minor],
        }
    }
}

impl SignalConstraints {
    /// The narrower 150–240 s cycle range listed with the field settings.
    pub fn field_cycle_range() -> Self {
        SignalConstraints {
            cycle_min_s: 150,
            ..Self::default()
        }
    }

    fn limits(&self, phase: usize) -> &PhaseLimits {
        &self.phases[phase - 1]
    }

    fn pair_bounds(&self, (a, b): (usize, usize)) -> (u32, u32) {
        let (pa, pb) = (self.limits(a), self.limits(b));
        let clear = pa.clearance() + pb.clearance();
        (
            pa.min_green_s + pb.min_green_s + clear,
            pa.max_green_s + pb.max_green_s + clear,
        )
    }

    /// Feasible barrier times for a given cycle.
    fn barrier_range(&self, cycle: u32) -> Result<(u32, u32)> {
        let mut lo = 0u32;
        let mut hi = u32::MAX;
        for ring in 0..2 {
            let (min1, max1) = self.pair_bounds(BARRIER_GROUPS[0][ring]);
            let (min2, max2) = self.pair_bounds(BARRIER_GROUPS[1][ring]);
            if min1 + min2 > cycle {
                return Err(Error::Infeasible(format!(
                    "ring {} needs at least {} s but cycle is {cycle} s",
                    ring + 1,
                    min1 + min2
                )));
            }
            if max1 + max2 < cycle {
                return Err(Error::Infeasible(format!(
                    "ring {} can fill at most {} s of a {cycle} s cycle",
                    ring + 1,
                    max1 + max2
                )));
            }
            lo = lo.max(min1).max(cycle.saturating_sub(max2));
            hi = hi.min(max1).min(cycle - min2);
        }
        if lo > hi {
            return Err(Error::Infeasible(format!(
                "no barrier time satisfies both rings for a {cycle} s cycle (needs [{lo}, {hi}])"
            )));
        }
        Ok((lo, hi))
    }

    pub fn validate(&self) -> Result<()> {
        if self.cycle_min_s == 0 || self.cycle_min_s > self.cycle_max_s {
            return Err(Error::Config(format!(
                "cycle range [{}, {}] is empty",
                self.cycle_min_s, self.cycle_max_s
            )));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.min_green_s > p.max_green_s {
                return Err(Error::Config(format!("phase {} min green exceeds max green", i + 1)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub min_green_s: u32,
    pub max_green_s: u32,
    pub green_s: u32,
    pub yellow_s: u32,
    pub all_red_s: u32,
}

impl PhaseTiming {
    fn span(&self) -> u32 {
        self.green_s + self.yellow_s + self.all_red_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseState {
    Green,
    Yellow,
    Red,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalTimingPlan {
    pub cycle_length_s: u32,
    pub offset_s: u32,
    /// Duration of the first (coordinated) barrier group.
    pub barrier_time_s: u32,
    /// Indexed by phase number minus one.
    pub phases: [PhaseTiming; NUM_PHASES],
}

impl SignalTimingPlan {
    pub fn phase(&self, p: usize) -> &PhaseTiming {
        &self.phases[p - 1]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.cycle_length_s;
        if c == 0 || self.offset_s >= c {
            return Err(Error::invalid(format!("offset {} not in [0, {c})", self.offset_s)));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.green_s < p.min_green_s || p.green_s > p.max_green_s {
                return Err(Error::invalid(format!("phase {} green {} outside its limits", i + 1, p.green_s)));
            }
        }
        for ring in 0..2 {
            let g1 = self.phase(BARRIER_GROUPS[0][ring].0).span() + self.phase(BARRIER_GROUPS[0][ring].1).span();
            let g2 = self.phase(BARRIER_GROUPS[1][ring].0).span() + self.phase(BARRIER_GROUPS[1][ring].1).span();
            if g1 != self.barrier_time_s {
                return Err(Error::invalid(format!("ring {} first group {g1} s != barrier {}", ring + 1, self.barrier_time_s)));
            }
            if g1 + g2 != c {
                return Err(Error::invalid(format!("ring {} sums to {} s, cycle {c}", ring + 1, g1 + g2)));
            }
        }
        Ok(())
    }

    /// State of `phase` during second `t` (absolute seconds; may be negative).
    pub fn state_at(&self, phase: usize, t: i64) -> PhaseState {
        let c = i64::from(self.cycle_length_s);
        let tau = (t - i64::from(self.offset_s)).rem_euclid(c) as u32;
        let (group, ring) = BARRIER_GROUPS
            .iter()
            .enumerate()
            .find_map(|(g, rings)| {
                rings
                    .iter()
                    .position(|&(a, b)| a == phase || b == phase)
                    .map(|r| (g, r))
            })
            .expect("phase in 1..=8");
        let mut start = if group == 0 { 0 } else { self.barrier_time_s };
        let (a, b) = BARRIER_GROUPS[group][ring];
        if phase == b {
            start += self.phase(a).span();
        }
        let p = self.phase(phase);
        if tau < start {
            return PhaseState::Red;
        }
        let rel = tau - start;
        if rel < p.green_s {
            PhaseState::Green
        } else if rel < p.green_s + p.yellow_s {
            PhaseState::Yellow
        } else {
            PhaseState::Red
        }
    }

    pub fn is_green(&self, phase: usize, t: i64) -> bool {
        self.state_at(phase, t) == PhaseState::Green
    }

    /// Compact numeric summary: cycle, barrier, and green fraction per phase.
    pub fn summary(&self) -> [f64; 10] {
        let c = f64::from(self.cycle_length_s);
        let mut out = [0.0; 10];
        out[0] = c;
        out[1] = f64::from(self.barrier_time_s);
        for (i, p) in self.phases.iter().enumerate() {
            out[2 + i] = f64::from(p.green_s) / c;
        }
        out
    }
}

/// Sample a plan: uniform cycle, uniform offset, uniform feasible barrier,
/// and uniform feasible green splits inside each ring-group.
pub fn sample_plan(seed: u64, constraints: &SignalConstraints) -> Result<SignalTimingPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_plan_with(&mut rng, constraints)
}

pub fn sample_plan_with<R: Rng + ?Sized>(rng: &mut R, constraints: &SignalConstraints) -> Result<SignalTimingPlan> {
    constraints.validate()?;
    let cycle = rng.random_range(constraints.cycle_min_s..=constraints.cycle_max_s);
    let (lo, hi) = constraints.barrier_range(cycle)?;
    let offset = rng.random_range(0..cycle);
    let barrier = rng.random_range(lo..=hi);

    let mut phases = [PhaseTiming {
        min_green_s: 0,
        max_green_s: 0,
        green_s: 0,
        yellow_s: 0,
        all_red_s: 0,
    }; NUM_PHASES];
    for (i, p) in phases.iter_mut().enumerate() {
        let l = constraints.phases[i];
        *p = PhaseTiming {
            min_green_s: l.min_green_s,
            max_green_s: l.max_green_s,
            green_s: l.min_green_s,
            yellow_s: l.yellow_s,
            all_red_s: l.all_red_s,
        };
    }
    for (group, budget) in [(0, barrier), (1, cycle - barrier)] {
        for ring in 0..2 {
            let (a, b) = BARRIER_GROUPS[group][ring];
            let (la, lb) = (constraints.phases[a - 1], constraints.phases[b - 1]);
            let greens = budget - la.clearance() - lb.clearance();
            let ga_lo = la.min_green_s.max(greens.saturating_sub(lb.max_green_s));
            let ga_hi = la.max_green_s.min(greens - lb.min_green_s);
            let ga = rng.random_range(ga_lo..=ga_hi);
            phases[a - 1].green_s = ga;
            phases[b - 1].green_s = greens - ga;
        }
    }
    let plan = SignalTimingPlan {
        cycle_length_s: cycle,
        offset_s: offset,
        barrier_time_s: barrier,
        phases,
    };
    debug_assert!(plan.validate().is_ok());
    Ok(plan)
}

/// Binary green indicators, one row per phase, at bucket resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalStateSeries {
    pub plan: SignalTimingPlan,
    pub bucket_seconds: u32,
    /// `green[p][b]` for phase `p + 1`, bucket `b`.
    pub green: Vec<Vec<u8>>,
}

impl SignalStateSeries {
    pub fn window(&self) -> usize {
        self.green.first().map_or(0, Vec::len)
    }

    /// Column of all eight phase indicators at bucket `b`.
    pub fn column(&self, b: usize) -> [f64; NUM_PHASES] {
        let mut out = [0.0; NUM_PHASES];
        for (p, row) in self.green.iter().enumerate() {
            out[p] = f64::from(row[b]);
        }
        out
    }
}

/// Render a plan over buckets `[0, w)`. A bucket is green when the phase is
/// green for at least half of its seconds.
pub fn render_series(plan: &SignalTimingPlan, w: usize, bucket_seconds: u32) -> Result<SignalStateSeries> {
    plan.validate()?;
    if bucket_seconds == 0 {
        return Err(Error::invalid("bucket_seconds must be positive"));
    }
    let bs = i64::from(bucket_seconds);
    let mut green = vec![vec![0u8; w]; NUM_PHASES];
    for (p, row) in green.iter_mut().enumerate() {
        for (b, cell) in row.iter_mut().enumerate() {
            let start = b as i64 * bs;
            let secs = (start..start + bs).filter(|&t| plan.is_green(p + 1, t)).count() as i64;
            *cell = u8::from(2 * secs >= bs);
        }
    }
    Ok(SignalStateSeries {
        plan: plan.clone(),
        bucket_seconds,
        green,
    })
}
