//! Test track, speed profile and wind disturbance.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vehicle::{VehicleState, GEOMETRY_EPS};

pub const SPEED_MIN: f64 = 5.0;
pub const SPEED_MAX: f64 = 21.0;
pub const WIND_MIN: f64 = 25.0;
pub const WIND_MAX: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Straight,
    Arc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub kind: SegmentKind,
    pub length: f64,
    #[serde(default)]
    pub curvature: f64,
}

impl Segment {
    pub fn straight(length: f64) -> Self {
        Self { kind: SegmentKind::Straight, length, curvature: 0.0 }
    }

    /// Arc of the given radius sweeping `angle_deg`; the sign of the angle
    /// sets the turn direction.
    pub fn arc(radius: f64, angle_deg: f64) -> Self {
        let k = angle_deg.signum() / radius;
        Self { kind: SegmentKind::Arc, length: radius * angle_deg.abs().to_radians(), curvature: k }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub segments: Vec<Segment>,
}

impl TrackSpec {
    /// 150 m straight, R40 +90 deg, 80 m straight, R25 -180 deg, 100 m
    /// straight, R60 +120 deg, 120 m straight.
    pub fn desk_track_v1() -> Self {
        Self {
            name: Some("desk_track_v1".into()),
            segments: vec![
                Segment::straight(150.0),
                Segment::arc(40.0, 90.0),
                Segment::straight(80.0),
                Segment::arc(25.0, -180.0),
                Segment::straight(100.0),
                Segment::arc(60.0, 120.0),
                Segment::straight(120.0),
            ],
        }
    }

    pub fn total_length(&self) -> f64 {
        self.segments.iter().map(|s| s.length).sum()
    }

    pub fn validate(&self, ye_bound: f64) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::Config("track has no segments".into()));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            if !(seg.length > 0.0) || !seg.curvature.is_finite() {
                return Err(Error::Config(format!("segment {i}: non-positive length or bad curvature")));
            }
            if seg.kind == SegmentKind::Straight && seg.curvature != 0.0 {
                return Err(Error::Config(format!("segment {i}: straight with curvature")));
            }
            if seg.curvature.abs() * ye_bound >= 1.0 {
                return Err(Error::Config(format!("segment {i}: |k| * ye_bound >= 1")));
            }
        }
        Ok(())
    }

    /// Curvature at arc length `s`, clamped to the track ends. A point on a
    /// segment boundary belongs to the segment ending there.
    pub fn curvature_at(&self, s: f64) -> f64 {
        let mut end = 0.0;
        for seg in &self.segments {
            end += seg.length;
            if s <= end {
                return seg.curvature;
            }
        }
        self.segments.last().map_or(0.0, |s| s.curvature)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedKnot {
    pub s: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedProfile {
    pub knots: Vec<SpeedKnot>,
}

impl SpeedProfile {
    /// Straights at 17-21 m/s, the R25 hairpin at 7 m/s.
    pub fn desk_track_v1() -> Self {
        let knots = [
            (0.0, 18.0),
            (90.0, 21.0),
            (125.0, 13.0),
            (212.8, 13.0),
            (240.0, 17.0),
            (255.0, 17.0),
            (285.0, 7.0),
            (371.4, 7.0),
            (400.0, 14.0),
            (440.0, 19.0),
            (460.0, 15.0),
            (597.0, 15.0),
            (640.0, 21.0),
            (717.1, 21.0),
        ];
        Self { knots: knots.iter().map(|&(s, v)| SpeedKnot { s, v }).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.knots.is_empty() {
            return Err(Error::Config("speed profile has no knots".into()));
        }
        if self.knots.windows(2).any(|w| !(w[0].s < w[1].s)) {
            return Err(Error::Config("speed knots must be strictly increasing in s".into()));
        }
        if self.knots.iter().any(|k| !(SPEED_MIN..=SPEED_MAX).contains(&k.v)) {
            return Err(Error::Config(format!("speed knots must lie in [{SPEED_MIN}, {SPEED_MAX}]")));
        }
        Ok(())
    }

    pub fn speed_at(&self, s: f64) -> f64 {
        let first = self.knots[0];
        let last = self.knots[self.knots.len() - 1];
        if s <= first.s {
            return first.v;
        }
        if s >= last.s {
            return last.v;
        }
        let i = self.knots.partition_point(|k| k.s <= s);
        let (a, b) = (self.knots[i - 1], self.knots[i]);
        a.v + (b.v - a.v) * (s - a.s) / (b.s - a.s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindProfile {
    pub base: f64,
    pub amplitude: f64,
    pub period: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for WindProfile {
    fn default() -> Self {
        Self { base: 37.5, amplitude: 12.5, period: 20.0, noise_std: 1.0, seed: 7 }
    }
}

impl WindProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.period > 0.0) || !(self.noise_std >= 0.0) || !self.base.is_finite() || !self.amplitude.is_finite() {
            return Err(Error::Config(format!("invalid wind profile {self:?}")));
        }
        Ok(())
    }

    /// Wind speed at time `t`, clipped to `[WIND_MIN, WIND_MAX]`.
    ///
    /// The noise sample depends only on `(seed, t)` rounded to the
    /// millisecond, so queries can come in any order.
    pub fn wind_at(&self, t: f64) -> f64 {
        let periodic = self.base + self.amplitude * (2.0 * PI * t / self.period).sin();
        let noise = if self.noise_std > 0.0 {
            let tick = (t.max(0.0) * 1000.0).round() as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ splitmix64(tick)));
            Normal::new(0.0, self.noise_std).expect("finite std").sample(&mut rng)
        } else {
            0.0
        };
        (periodic + noise).clamp(WIND_MIN, WIND_MAX)
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Path progression over `dt` at the current Frenet state.
pub fn advance_arclength(s: f64, state: &VehicleState, k: f64, dt: f64) -> Result<f64> {
    let denom = 1.0 - state.ye * k;
    if denom.abs() <= GEOMETRY_EPS {
        return Err(Error::SingularGeometry(denom.abs()));
    }
    let rate = (state.vx * state.theta_e.cos() - state.vy * state.theta_e.sin()) / denom;
    Ok(s + dt * rate)
}
