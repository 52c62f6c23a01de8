//! Shared domain types and waveform bucket arithmetic.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::SignalStateSeries;
use crate::template::TemplateKind;
use crate::{BUCKET_SECONDS, SATURATION_CAP, WINDOW};

/// Intersection approach, named by direction of travel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Approach {
    NB,
    SB,
    EB,
    WB,
}

impl Approach {
    pub const ALL: [Approach; 4] = [Approach::NB, Approach::SB, Approach::EB, Approach::WB];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Approach {
        Self::ALL[i % 4]
    }

    /// Direction of travel after performing `movement` from this approach.
    pub fn destination(self, movement: Movement) -> Approach {
        use Approach::*;
        match (self, movement) {
            (a, Movement::Through) => a,
            (EB, Movement::Left) | (WB, Movement::Right) => NB,
            (WB, Movement::Left) | (EB, Movement::Right) => SB,
            (SB, Movement::Left) | (NB, Movement::Right) => EB,
            (NB, Movement::Left) | (SB, Movement::Right) => WB,
        }
    }

    pub fn is_major(self) -> bool {
        matches!(self, Approach::EB | Approach::WB)
    }
}

impl fmt::Display for Approach {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Approach::NB => "NB",
            Approach::SB => "SB",
            Approach::EB => "EB",
            Approach::WB => "WB",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Movement {
    Left,
    Through,
    Right,
}

impl Movement {
    pub const ALL: [Movement; 3] = [Movement::Left, Movement::Through, Movement::Right];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaveformKind {
    StopBar,
    Exit,
    Inflow,
}

/// One detector's per-bucket vehicle counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Waveform {
    pub lane_id: String,
    pub kind: WaveformKind,
    pub buckets: Vec<u8>,
    pub bucket_seconds: u32,
}

impl Waveform {
    pub fn new(lane_id: impl Into<String>, kind: WaveformKind, buckets: Vec<u8>, bucket_seconds: u32) -> Self {
        Waveform {
            lane_id: lane_id.into(),
            kind,
            buckets,
            bucket_seconds,
        }
    }

    pub fn zeros(lane_id: impl Into<String>, kind: WaveformKind, w: usize) -> Self {
        Self::new(lane_id, kind, alloc::vec![0; w], BUCKET_SECONDS)
    }

    pub fn total(&self) -> u64 {
        self.buckets.iter().map(|&c| u64::from(c)).sum()
    }

    /// Sum consecutive groups of `factor` buckets.
    ///
    /// Coarser buckets may exceed the 5 s saturation cap; their sums are
    /// saturated at `u8::MAX` only if a single group holds more than 255
    /// vehicles, which valid waveforms cannot reach for `factor <= 31`.
    pub fn rebucket(&self, factor: usize) -> Result<Waveform> {
        let sums = rebucket_counts(&self.buckets, factor)?;
        Ok(Waveform {
            lane_id: self.lane_id.clone(),
            kind: self.kind,
            buckets: sums.into_iter().map(|s| s.min(u32::from(u8::MAX)) as u8).collect(),
            bucket_seconds: self.bucket_seconds * factor as u32,
        })
    }
}

fn check_factor(len: usize, factor: usize) -> Result<()> {
    if factor == 0 || len % factor != 0 {
        return Err(Error::invalid(format!(
            "rebucket factor {factor} does not divide window {len}"
        )));
    }
    Ok(())
}

/// Integer rebucketing; exact sum preservation.
pub fn rebucket_counts(counts: &[u8], factor: usize) -> Result<Vec<u32>> {
    check_factor(counts.len(), factor)?;
    Ok(counts
        .chunks_exact(factor)
        .map(|c| c.iter().map(|&v| u32::from(v)).sum())
        .collect())
}

/// Float rebucketing used on raw model outputs.
pub fn rebucket_values(values: &[f64], factor: usize) -> Result<Vec<f64>> {
    check_factor(values.len(), factor)?;
    Ok(values.chunks_exact(factor).map(|c| c.iter().sum()).collect())
}

/// Result of [`clip_saturation`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clipped {
    pub counts: Vec<u8>,
    /// Number of buckets that exceeded the cap.
    pub saturation_events: usize,
}

/// Clip raw per-bucket counts to the detector saturation cap.
pub fn clip_saturation(counts: &[i64]) -> Result<Clipped> {
    let mut events = 0;
    let mut out = Vec::with_capacity(counts.len());
    for (i, &c) in counts.iter().enumerate() {
        if c < 0 {
            return Err(Error::invalid(format!("negative count {c} at bucket {i}")));
        }
        if c > i64::from(SATURATION_CAP) {
            events += 1;
        }
        out.push(c.min(i64::from(SATURATION_CAP)) as u8);
    }
    Ok(Clipped {
        counts: out,
        saturation_events: events,
    })
}

/// Turning-movement ratios, one row per approach in [`Approach::ALL`]
/// order, columns left/through/right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurningMovementCounts {
    pub ratios: [[f64; 3]; 4],
    pub horizon_seconds: u32,
    /// `false` rows belong to approaches absent from the topology.
    pub present: [bool; 4],
}

impl TurningMovementCounts {
    pub const HORIZON_SECONDS: u32 = 2400;

    pub fn validate(&self) -> Result<()> {
        for (a, row) in self.ratios.iter().enumerate() {
            for &r in row {
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::OutOfRange {
                        field: "tmc",
                        value: r,
                        min: 0.0,
                        max: 1.0,
                    });
                }
            }
            let sum: f64 = row.iter().sum();
            if self.present[a] {
                if crate::math::abs(sum - 1.0) > 1e-9 {
                    return Err(Error::invalid(format!(
                        "tmc row {} sums to {sum}",
                        Approach::from_index(a)
                    )));
                }
            } else if sum != 0.0 {
                return Err(Error::invalid(format!(
                    "absent approach {} has nonzero tmc row",
                    Approach::from_index(a)
                )));
            }
        }
        Ok(())
    }

    pub fn flattened(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for (a, row) in self.ratios.iter().enumerate() {
            out[a * 3..a * 3 + 3].copy_from_slice(row);
        }
        out
    }

    /// Rows rotated so that approach `first` comes first.
    pub fn rotated(&self, first: Approach) -> [f64; 12] {
        let mut out = [0.0; 12];
        for k in 0..4 {
            let row = &self.ratios[(first.index() + k) % 4];
            out[k * 3..k * 3 + 3].copy_from_slice(row);
        }
        out
    }
}

/// Driving-behaviour vector (exactly nine model features).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrivingBehavior {
    pub accel: f64,
    pub decel: f64,
    pub emergency_decel: f64,
    pub min_gap: f64,
    pub sigma: f64,
    pub tau: f64,
    pub lc_strategic: f64,
    pub lc_cooperative: f64,
    pub lc_speed_gain: f64,
}

impl DrivingBehavior {
    pub const FIELDS: [&'static str; 9] = [
        "accel",
        "decel",
        "emergency_decel",
        "min_gap",
        "sigma",
        "tau",
        "lc_strategic",
        "lc_cooperative",
        "lc_speed_gain",
    ];

    /// Allowed `[min, max]` per field, in [`Self::FIELDS`] order.
    pub const RANGES: [(f64, f64); 9] = [
        (1.6, 3.6),
        (3.0, 6.0),
        (6.0, 12.0),
        (1.0, 4.0),
        (0.1, 1.0),
        (0.1, 3.0),
        (0.1, 3.0),
        (0.1, 1.0),
        (0.1, 3.0),
    ];

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.accel,
            self.decel,
            self.emergency_decel,
            self.min_gap,
            self.sigma,
            self.tau,
            self.lc_strategic,
            self.lc_cooperative,
            self.lc_speed_gain,
        ]
    }

    pub fn from_array(v: [f64; 9]) -> Self {
        DrivingBehavior {
            accel: v[0],
            decel: v[1],
            emergency_decel: v[2],
            min_gap: v[3],
            sigma: v[4],
            tau: v[5],
            lc_strategic: v[6],
            lc_cooperative: v[7],
            lc_speed_gain: v[8],
        }
    }

    /// Range midpoints.
    pub fn nominal() -> Self {
        let mut v = [0.0; 9];
        for (x, (lo, hi)) in v.iter_mut().zip(Self::RANGES) {
            *x = 0.5 * (lo + hi);
        }
        Self::from_array(v)
    }

    pub fn validate(&self) -> Result<()> {
        for ((value, (min, max)), field) in self.to_array().into_iter().zip(Self::RANGES).zip(Self::FIELDS) {
            if !(min..=max).contains(&value) {
                return Err(Error::OutOfRange { field, value, min, max });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncomingLane {
    pub lane_id: String,
    pub movement: Movement,
    /// Index within the template's (approach, movement) slot group.
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutgoingLane {
    pub lane_id: String,
    /// Index within the template's outgoing group for this direction.
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedingLane {
    pub lane_id: String,
    pub slot: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApproachLanes {
    pub approach: Approach,
    #[serde(default)]
    pub incoming: Vec<IncomingLane>,
    /// Lanes leaving the intersection in this direction of travel.
    #[serde(default)]
    pub outgoing: Vec<OutgoingLane>,
    /// Upstream lanes carrying inflow detectors.
    #[serde(default)]
    pub feeding: Vec<FeedingLane>,
}

/// Physical lanes of one intersection and their template slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionTopology {
    pub id: String,
    pub approaches: Vec<ApproachLanes>,
    /// Distance to the upstream intersection, when known (m).
    #[serde(default)]
    pub spacing_m: Option<f64>,
}

impl IntersectionTopology {
    pub fn approach(&self, a: Approach) -> Option<&ApproachLanes> {
        self.approaches.iter().find(|l| l.approach == a)
    }

    /// An approach is present when vehicles can enter from it.
    pub fn has_approach(&self, a: Approach) -> bool {
        self.approach(a).is_some_and(|l| !l.incoming.is_empty())
    }

    pub fn movements(&self, a: Approach) -> [bool; 3] {
        let mut out = [false; 3];
        if let Some(l) = self.approach(a) {
            for lane in &l.incoming {
                out[lane.movement.index()] = true;
            }
        }
        out
    }

    /// Mask of template slots with no physical lane.
    pub fn dummy_mask(&self, kind: TemplateKind) -> Result<Vec<bool>> {
        crate::template::dummy_mask(self, kind)
    }
}

/// One simulation run: `(j, sig, tmc, drv, stp, ext, inf)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRecord {
    /// Intersection id.
    pub j: String,
    pub sig: SignalStateSeries,
    pub tmc: TurningMovementCounts,
    pub drv: DrivingBehavior,
    pub stp: BTreeMap<String, Waveform>,
    pub ext: BTreeMap<String, Waveform>,
    pub inf: BTreeMap<String, Waveform>,
}

impl SimulationRecord {
    pub fn window(&self) -> usize {
        self.sig.window()
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.window();
        let bs = self.sig.bucket_seconds;
        for wf in self.stp.values().chain(self.ext.values()).chain(self.inf.values()) {
            if wf.buckets.len() != w || wf.bucket_seconds != bs {
                return Err(Error::shape("record waveform", &[wf.buckets.len()], &[w]));
            }
        }
        self.tmc.validate()?;
        self.drv.validate()
    }
}

/// Default window length when a caller does not specify one.
pub fn default_window() -> usize {
    WINDOW
}
