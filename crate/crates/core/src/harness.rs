//! Closed-loop experiments: plant, stiffness adaptation and MPC wired
//! together, plus run logs and tracking metrics.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ga::{Fitness, GaConfig};
use crate::lpv::StiffnessPair;
use crate::mpc::{mpc_step, MpcConfig, MpcSolution, ReferencePoint, ReferenceWindow, NU, NX};
use crate::nn::{FeatureVector, MlpModel};
use crate::qp::QpStatus;
use crate::track::{advance_arclength, SpeedProfile, TrackSpec, WindProfile};
use crate::vehicle::{drag_force, step_rk4, ControlInput, PacejkaCoeffs, VehicleParams, VehicleState};

/// Plant integration substeps per control period.
pub const SUBSTEPS: usize = 10;

/// Consecutive `max_iter` QP exits tolerated before a run is aborted.
pub const MAX_ITER_STREAK: usize = 10;

/// Fitness assigned to runs that abort or produce non-finite errors.
pub const FITNESS_PENALTY: f64 = 1e6;

pub const Q_BOUNDS: [f64; 2] = [1e-4, 10.0];
pub const R_BOUNDS: [f64; 2] = [1e-3, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Adaptation {
    #[default]
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub vehicle: VehicleParams,
    pub tire: PacejkaCoeffs,
    #[serde(default)]
    pub mpc: MpcConfig,
    pub track: TrackSpec,
    pub speed: SpeedProfile,
    #[serde(default)]
    pub wind: WindProfile,
    #[serde(default)]
    pub adaptation: Adaptation,
    /// Trained estimator, required when adaptation is on. Relative paths
    /// resolve against the config file's directory.
    #[serde(default)]
    pub model_path: Option<PathBuf>,
    /// Fixed stiffness used with adaptation off. Defaults to the tire's
    /// small-angle slope times `nominal_scale`.
    #[serde(default)]
    pub nominal_stiffness: Option<StiffnessPair>,
    #[serde(default = "one")]
    pub nominal_scale: f64,
    pub duration: f64,
    /// Added to `wind.seed` to select the wind noise stream.
    #[serde(default)]
    pub seed: u64,
    /// When false the `solve_time` column is written as zero so that logs
    /// are byte-reproducible.
    #[serde(default = "yes")]
    pub record_solve_time: bool,
    #[serde(default)]
    pub ga: GaConfig,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    /// The shipped desk track scenario: one lap with gusting head wind.
    pub fn desk_track_v1() -> Self {
        let vehicle = VehicleParams::default();
        Self {
            name: Some("desk_track_v1".into()),
            tire: PacejkaCoeffs::default_for(&vehicle),
            vehicle,
            mpc: MpcConfig::default(),
            track: TrackSpec::desk_track_v1(),
            speed: SpeedProfile::desk_track_v1(),
            wind: WindProfile::default(),
            adaptation: Adaptation::On,
            model_path: Some(PathBuf::from("model.json")),
            nominal_stiffness: None,
            nominal_scale: 1.0,
            duration: 53.0,
            seed: 0,
            record_solve_time: true,
            ga: GaConfig::default(),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Loads a config and resolves `model_path` relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        if let (Some(mp), Some(dir)) = (cfg.model_path.as_mut(), path.parent()) {
            if mp.is_relative() {
                *mp = dir.join(&*mp);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks every sub-config. File existence is checked by
    /// [`ExperimentConfig::load_estimator`].
    pub fn validate(&self) -> Result<()> {
        self.vehicle.validate()?;
        self.tire.validate(&self.vehicle)?;
        self.mpc.validate()?;
        self.track.validate(self.mpc.ye_bound)?;
        self.speed.validate()?;
        self.wind.validate()?;
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::Config("duration must be positive".into()));
        }
        if !(self.nominal_scale > 0.0) {
            return Err(Error::Config("nominal_scale must be positive".into()));
        }
        if self.adaptation == Adaptation::On && self.model_path.is_none() {
            return Err(Error::Config("adaptation is on but model_path is missing".into()));
        }
        Ok(())
    }

    pub fn nominal(&self) -> StiffnessPair {
        self.nominal_stiffness
            .unwrap_or_else(|| StiffnessPair::nominal(&self.tire))
            .scaled(self.nominal_scale)
    }

    pub fn load_estimator(&self) -> Result<Option<MlpModel>> {
        match (self.adaptation, &self.model_path) {
            (Adaptation::Off, _) => Ok(None),
            (Adaptation::On, Some(p)) => {
                if !p.exists() {
                    return Err(Error::Config(format!("model file {} does not exist", p.display())));
                }
                Ok(Some(MlpModel::load(p)?))
            }
            (Adaptation::On, None) => Err(Error::Config("adaptation is on but model_path is missing".into())),
        }
    }

    pub fn n_records(&self) -> usize {
        (self.duration / self.mpc.ts + 1e-9).floor() as usize + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t: f64,
    pub s: f64,
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
    pub ye: f64,
    pub theta_e: f64,
    pub delta: f64,
    pub ax: f64,
    pub ddelta: f64,
    pub dax: f64,
    pub v_ref: f64,
    pub k: f64,
    pub wind: f64,
    pub cf_hat: f64,
    pub cr_hat: f64,
    pub qp_iters: usize,
    pub solve_time: f64,
    pub slack: f64,
}

pub const LOG_HEADER: &str =
    "t,s,vx,vy,omega,ye,theta_e,delta,ax,ddelta,dax,v_ref,k,wind,cf_hat,cr_hat,qp_iters,solve_time,slack";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AbortReason {
    SingularGeometry(String),
    SolverFailure { consecutive_max_iter: usize },
    NonFiniteState,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    /// Set when the run stopped early; `records` then holds the partial log.
    pub aborted: Option<AbortReason>,
}

impl RunLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        wr.write_record(LOG_HEADER.split(','))?;
        for r in &self.records {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
        if header.join(",") != LOG_HEADER {
            return Err(Error::Config(format!("unexpected run log header {}", header.join(","))));
        }
        let records = rd.deserialize().collect::<std::result::Result<Vec<LogRecord>, _>>()?;
        Ok(Self { records, aborted: None })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }
}

/// Reference window over the horizon. Entry `j` is the target for the
/// state `j + 1` steps ahead, placed where the vehicle would be at its
/// current speed.
pub fn reference_window(s: f64, vx: f64, track: &TrackSpec, speed: &SpeedProfile, cfg: &MpcConfig) -> ReferenceWindow {
    let step = cfg.ts * vx.max(0.0);
    let points = (1..=cfg.np)
        .map(|i| {
            let si = s + i as f64 * step;
            ReferencePoint { v_ref: speed.speed_at(si), k: track.curvature_at(si) }
        })
        .collect();
    ReferenceWindow { points }
}

/// Runs the closed loop, loading the estimator named by the config.
pub fn run_closed_loop(cfg: &ExperimentConfig) -> Result<RunLog> {
    cfg.validate()?;
    let model = cfg.load_estimator()?;
    run_closed_loop_with(cfg, model.as_ref())
}

/// Runs the closed loop with an in-memory estimator. `estimator` is used
/// only when adaptation is on; with adaptation on and no estimator the
/// nominal stiffness is used.
pub fn run_closed_loop_with(cfg: &ExperimentConfig, estimator: Option<&MlpModel>) -> Result<RunLog> {
    cfg.validate()?;
    let params = &cfg.vehicle;
    let coeffs = &cfg.tire;
    let mpc = &cfg.mpc;
    let estimator = if cfg.adaptation == Adaptation::On { estimator } else { None };
    let nominal = cfg.nominal();
    let wind_profile = WindProfile { seed: cfg.wind.seed.wrapping_add(cfg.seed), ..cfg.wind };

    let n = cfg.n_records();
    let dt = mpc.ts / SUBSTEPS as f64;
    let mut log = RunLog { records: Vec::with_capacity(n), aborted: None };
    let mut s = 0.0;
    let mut x = VehicleState::new(cfg.speed.speed_at(0.0), 0.0, 0.0, 0.0, 0.0);
    // Start from the input that holds the initial speed in the model.
    let mut u_prev = ControlInput::new(0.0, drag_force(x.vx, 0.0, params) / params.m);
    let mut prev: Option<MpcSolution> = None;
    let mut streak = 0;

    for i in 0..n {
        let t = i as f64 * mpc.ts;
        let stiff = match estimator {
            Some(m) => m.predict(&FeatureVector { vx: x.vx, vy: x.vy, delta: u_prev.delta, ax: u_prev.ax, omega: x.omega }),
            None => nominal,
        };
        let refs = reference_window(s, x.vx, &cfg.track, &cfg.speed, mpc);
        let sol = match mpc_step(&x, &stiff, &refs, &u_prev, prev.as_ref(), mpc, params) {
            Ok(sol) => sol,
            Err(e @ (Error::DegenerateScheduling(_) | Error::SingularGeometry(_))) => {
                log::error!("run aborted at t = {t:.3}: {e}");
                log.aborted = Some(AbortReason::SingularGeometry(e.to_string()));
                return Ok(log);
            }
            Err(e) => return Err(e),
        };
        streak = if sol.status == QpStatus::MaxIter { streak + 1 } else { 0 };
        let wind = wind_profile.wind_at(t);
        let k_here = cfg.track.curvature_at(s);
        log.records.push(LogRecord {
            t,
            s,
            vx: x.vx,
            vy: x.vy,
            omega: x.omega,
            ye: x.ye,
            theta_e: x.theta_e,
            delta: sol.u0.delta,
            ax: sol.u0.ax,
            ddelta: sol.du0.delta,
            dax: sol.du0.ax,
            v_ref: cfg.speed.speed_at(s),
            k: k_here,
            wind,
            cf_hat: stiff.cf,
            cr_hat: stiff.cr,
            qp_iters: sol.qp_iterations,
            solve_time: if cfg.record_solve_time { sol.solve_time } else { 0.0 },
            slack: sol.slack,
        });
        if streak > MAX_ITER_STREAK {
            log::error!("run aborted at t = {t:.3}: {streak} consecutive max_iter solves");
            log.aborted = Some(AbortReason::SolverFailure { consecutive_max_iter: streak });
            return Ok(log);
        }

        let u = sol.u0;
        for _ in 0..SUBSTEPS {
            let k = cfg.track.curvature_at(s);
            let step = step_rk4(&x, &u, k, wind, params, coeffs, dt).and_then(|nx| {
                let ns = advance_arclength(s, &x, k, dt)?;
                Ok((nx, ns))
            });
            match step {
                Ok((nx, ns)) => {
                    x = nx;
                    s = ns;
                }
                Err(Error::SingularGeometry(d)) => {
                    log.aborted = Some(AbortReason::SingularGeometry(format!("|1 - ye*k| = {d:e}")));
                    return Ok(log);
                }
                Err(e) => return Err(e),
            }
        }
        if !x.is_finite() {
            log.aborted = Some(AbortReason::NonFiniteState);
            return Ok(log);
        }
        u_prev = u;
        prev = Some(sol);
    }
    Ok(log)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse_ye: f64,
    pub rmse_theta_e: f64,
    pub rmse_vx: f64,
    pub max_abs_ye: f64,
    pub max_abs_theta_e: f64,
    pub max_abs_vx_err: f64,
    pub mean_solve_time: f64,
    pub max_solve_time: f64,
    pub constraint_violations: usize,
}

impl Metrics {
    /// Equal-weight sum of the three tracking RMSEs.
    pub fn tracking_cost(&self) -> f64 {
        self.rmse_ye + self.rmse_theta_e + self.rmse_vx
    }
}

fn rms(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut sum, mut max, mut n) = (0.0, 0.0f64, 0usize);
    for x in xs {
        sum += x * x;
        max = max.max(x.abs());
        n += 1;
    }
    ((sum / n as f64).sqrt(), max)
}

/// Counts records whose applied input or increment leaves the hard bounds.
pub fn count_violations(log: &RunLog, mpc: &MpcConfig) -> usize {
    const TOL: f64 = 1e-9;
    let outside = |v: f64, lo: f64, hi: f64| v < lo - TOL || v > hi + TOL;
    log.records
        .iter()
        .filter(|r| {
            let u = [r.delta, r.ax];
            let du = [r.ddelta, r.dax];
            (0..NU).any(|j| outside(u[j], mpc.u_min[j], mpc.u_max[j]) || outside(du[j], mpc.du_min[j], mpc.du_max[j]))
        })
        .count()
}

pub fn compute_metrics(log: &RunLog, mpc: &MpcConfig) -> Result<Metrics> {
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    let r = &log.records;
    let (rmse_ye, max_abs_ye) = rms(r.iter().map(|r| r.ye));
    let (rmse_theta_e, max_abs_theta_e) = rms(r.iter().map(|r| r.theta_e));
    let (rmse_vx, max_abs_vx_err) = rms(r.iter().map(|r| r.vx - r.v_ref));
    Ok(Metrics {
        rmse_ye,
        rmse_theta_e,
        rmse_vx,
        max_abs_ye,
        max_abs_theta_e,
        max_abs_vx_err,
        mean_solve_time: r.iter().map(|r| r.solve_time).sum::<f64>() / r.len() as f64,
        max_solve_time: r.iter().map(|r| r.solve_time).fold(0.0, f64::max),
        constraint_violations: count_violations(log, mpc),
    })
}

/// Maps 7 genes to the diagonal weights `(Q, R)`.
pub fn genes_to_weights(genes: &[f64]) -> Result<([f64; NX], [f64; NU])> {
    if genes.len() != NX + NU {
        return Err(Error::DimensionMismatch(format!("expected {} genes, got {}", NX + NU, genes.len())));
    }
    let mut q = [0.0; NX];
    let mut r = [0.0; NU];
    q.copy_from_slice(&genes[..NX]);
    r.copy_from_slice(&genes[NX..]);
    Ok((q, r))
}

/// Sum of the three tracking RMSEs for the closed loop with the given
/// weights. Aborted or failed runs score [`FITNESS_PENALTY`].
pub fn closed_loop_fitness(genes: &[f64], scenario: &ExperimentConfig, estimator: Option<&MlpModel>) -> f64 {
    let Ok((q, r)) = genes_to_weights(genes) else {
        return FITNESS_PENALTY;
    };
    let cfg = ExperimentConfig { mpc: scenario.mpc.with_weights(q, r), ..scenario.clone() };
    match run_closed_loop_with(&cfg, estimator) {
        Ok(log) if log.aborted.is_none() => match compute_metrics(&log, &cfg.mpc) {
            Ok(m) if m.tracking_cost().is_finite() => m.tracking_cost(),
            _ => FITNESS_PENALTY,
        },
        _ => FITNESS_PENALTY,
    }
}

/// GA objective tuning the MPC weights on a fixed scenario.
pub struct ClosedLoopFitness<'a> {
    pub scenario: ExperimentConfig,
    pub estimator: Option<&'a MlpModel>,
}

impl Fitness for ClosedLoopFitness<'_> {
    fn bounds(&self) -> Vec<[f64; 2]> {
        let mut b = vec![Q_BOUNDS; NX];
        b.extend([R_BOUNDS; NU]);
        b
    }

    fn evaluate(&self, genes: &[f64], _stream: u64) -> f64 {
        closed_loop_fitness(genes, &self.scenario, self.estimator)
    }
}

/// Best weights found by the GA, as written by `tune-ga`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedWeights {
    pub q_diag: [f64; NX],
    pub r_diag: [f64; NU],
    pub fitness: f64,
}

impl TunedWeights {
    pub fn apply(&self, mpc: &MpcConfig) -> MpcConfig {
        mpc.with_weights(self.q_diag, self.r_diag)
    }
}
