use std::f64::consts::{FRAC_PI_6, PI};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::FeatureVector;
use crate::error::{Error, Result};
use crate::lpv::{clamp_stiffness, STIFFNESS_MAX, STIFFNESS_MIN};
use crate::vehicle::{
    drag_force, pacejka_force, slip_angles, step_rk4, Axle, ControlInput, PacejkaCoeffs, VehicleParams,
    VehicleState,
};

/// Below this slip angle the label switches from the secant to the tangent.
pub const SMALL_SLIP: f64 = 1e-4;

pub const MIN_POINTS: usize = 1000;

/// Secant cornering stiffness `F(alpha)/alpha`, clamped to the adaptation
/// range. Near zero slip the small-angle slope `B*C*D` is used.
pub fn secant_stiffness(alpha: f64, coeffs: &PacejkaCoeffs, axle: Axle) -> f64 {
    if alpha.abs() < SMALL_SLIP {
        clamp_stiffness(coeffs.small_angle_slope(axle))
    } else {
        clamp_stiffness(pacejka_force(alpha, coeffs, axle) / alpha)
    }
}

/// Randomized open-loop maneuvers used to excite the plant.
///
/// Each episode starts straight at a random speed and applies either a
/// steering step or a steering sine together with a constant longitudinal
/// command. Steering amplitudes shrink with speed so that the lateral
/// acceleration stays near the friction limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ManeuverPlan {
    pub speed_min: f64,
    pub speed_max: f64,
    /// Net longitudinal acceleration range, on top of drag compensation.
    pub accel_max: f64,
    pub delta_max: f64,
    /// Multiplier on the steady-state steering needed to reach `mu*g`.
    pub lateral_margin: f64,
    pub episode_duration: f64,
    pub sample_period: f64,
    pub substeps: usize,
    pub sine_freq_min: f64,
    pub sine_freq_max: f64,
}

impl Default for ManeuverPlan {
    fn default() -> Self {
        Self {
            speed_min: 5.0,
            speed_max: 25.0,
            accel_max: 3.0,
            delta_max: FRAC_PI_6,
            lateral_margin: 1.3,
            episode_duration: 2.0,
            sample_period: 0.033,
            substeps: 10,
            sine_freq_min: 0.2,
            sine_freq_max: 1.5,
        }
    }
}

impl ManeuverPlan {
    pub fn validate(&self) -> Result<()> {
        let ok = self.speed_min > 0.0
            && self.speed_max > self.speed_min
            && self.accel_max >= 0.0
            && self.delta_max > 0.0
            && self.lateral_margin > 0.0
            && self.episode_duration >= self.sample_period
            && self.sample_period > 0.0
            && self.substeps >= 1
            && self.sine_freq_max >= self.sine_freq_min
            && self.sine_freq_min > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid maneuver plan".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetRow {
    pub features: FeatureVector,
    pub cf: f64,
    pub cr: f64,
}

#[derive(Serialize, Deserialize)]
struct CsvRecord {
    vx: f64,
    vy: f64,
    delta: f64,
    ax: f64,
    omega: f64,
    cf: f64,
    cr: f64,
}

impl From<&DatasetRow> for CsvRecord {
    fn from(r: &DatasetRow) -> Self {
        let f = r.features;
        Self { vx: f.vx, vy: f.vy, delta: f.delta, ax: f.ax, omega: f.omega, cf: r.cf, cr: r.cr }
    }
}

impl From<CsvRecord> for DatasetRow {
    fn from(r: CsvRecord) -> Self {
        Self {
            features: FeatureVector { vx: r.vx, vy: r.vy, delta: r.delta, ax: r.ax, omega: r.omega },
            cf: r.cf,
            cr: r.cr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StiffnessDataset {
    pub rows: Vec<DatasetRow>,
    /// Plan and seed the rows were generated with, when known.
    pub maneuver: Option<ManeuverPlan>,
    pub seed: Option<u64>,
}

impl StiffnessDataset {
    pub fn from_rows(rows: Vec<DatasetRow>) -> Self {
        Self { rows, maneuver: None, seed: None }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn feature_rows(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.features.as_array().to_vec()).collect()
    }

    pub fn target_rows(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| vec![r.cf, r.cr]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.len() < 2 {
            return Err(Error::Config(format!("dataset has {} rows", self.rows.len())));
        }
        for (i, r) in self.rows.iter().enumerate() {
            let finite = r.features.as_array().iter().all(|v| v.is_finite());
            let in_range = [r.cf, r.cr].iter().all(|c| (STIFFNESS_MIN..=STIFFNESS_MAX).contains(c));
            if !finite || !in_range {
                return Err(Error::Config(format!("dataset row {i} is invalid")));
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(CsvRecord::from(r))?;
        }
        if self.rows.is_empty() {
            wr.write_record(["vx", "vy", "delta", "ax", "omega", "cf", "cr"])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let rows = rd.deserialize::<CsvRecord>().map(|rec| rec.map(DatasetRow::from)).collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self::from_rows(rows))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ds = Self::read_csv(std::fs::File::open(path)?)?;
        ds.validate()?;
        Ok(ds)
    }
}

/// Label for the plant sitting at `state` with steering `delta` applied.
pub fn label_row(
    state: &VehicleState,
    delta: f64,
    ax: f64,
    params: &VehicleParams,
    coeffs: &PacejkaCoeffs,
) -> DatasetRow {
    let (af, ar) = slip_angles(state, delta, params);
    DatasetRow {
        features: FeatureVector { vx: state.vx, vy: state.vy, delta, ax, omega: state.omega },
        cf: secant_stiffness(af, coeffs, Axle::Front),
        cr: secant_stiffness(ar, coeffs, Axle::Rear),
    }
}

/// Simulates randomized maneuvers on a straight road without wind and
/// labels every control-period sample with the secant stiffness of both
/// axles.
pub fn generate_dataset(
    params: &VehicleParams,
    coeffs: &PacejkaCoeffs,
    plan: &ManeuverPlan,
    n_points: usize,
    seed: u64,
) -> Result<StiffnessDataset> {
    if n_points < MIN_POINTS {
        return Err(Error::Config(format!("need at least {MIN_POINTS} points, got {n_points}")));
    }
    params.validate()?;
    coeffs.validate(params)?;
    plan.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n_points);
    let samples = (plan.episode_duration / plan.sample_period).round().max(1.0) as usize;
    let dt = plan.sample_period / plan.substeps as f64;
    let friction_turn = params.mu * params.g * params.wheelbase() * plan.lateral_margin;

    while rows.len() < n_points {
        let v0 = rng.gen_range(plan.speed_min..=plan.speed_max);
        let amp_cap = plan.delta_max.min(friction_turn / (v0 * v0));
        let amp = rng.gen_range(-amp_cap..=amp_cap);
        let sine = rng.gen_bool(0.5);
        let freq = rng.gen_range(plan.sine_freq_min..=plan.sine_freq_max);
        let onset = rng.gen_range(0.0..0.5 * plan.episode_duration);
        let net_accel = rng.gen_range(-plan.accel_max..=plan.accel_max);

        let mut x = VehicleState::new(v0, 0.0, 0.0, 0.0, 0.0);
        for j in 0..samples {
            let t = j as f64 * plan.sample_period;
            let delta = if sine {
                amp * (2.0 * PI * freq * t).sin()
            } else if t >= onset {
                amp
            } else {
                0.0
            };
            let ax = drag_force(x.vx, 0.0, params) / params.m + net_accel;
            rows.push(label_row(&x, delta, ax, params, coeffs));
            if rows.len() == n_points {
                break;
            }
            let u = ControlInput::new(delta, ax);
            for _ in 0..plan.substeps {
                x = step_rk4(&x, &u, 0.0, 0.0, params, coeffs, dt)?;
            }
            if !x.is_finite() || x.vx < plan.speed_min || x.vx > plan.speed_max {
                break;
            }
        }
    }
    let ds = StiffnessDataset { rows, maneuver: Some(plan.clone()), seed: Some(seed) };
    ds.validate()?;
    Ok(ds)
}
