//! Condensed LPV-MPC over control increments.
//!
//! The decision vector is `z = [du_0, ..., du_{Np-1}, s]` where `s >= 0`
//! softens the lateral-error bound. Predicted states are eliminated through
//! the Euler-discretized LPV models, leaving a dense QP for [`crate::qp`].

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lpv::{build_lpv, discretize_euler, schedule_horizon, DiscreteModel, PredictedTrajectory, StiffnessPair};
use crate::qp::{solve_qp, QpProblem, QpStatus};
use crate::vehicle::{ControlInput, VehicleParams, VehicleState};

pub const NX: usize = 5;
pub const NU: usize = 2;
const YE_INDEX: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcConfig {
    #[serde(rename = "Np")]
    pub np: usize,
    #[serde(rename = "Ts")]
    pub ts: f64,
    pub q_diag: [f64; NX],
    pub r_diag: [f64; NU],
    pub u_min: [f64; NU],
    pub u_max: [f64; NU],
    pub du_min: [f64; NU],
    pub du_max: [f64; NU],
    pub ye_bound: f64,
    pub slack_weight: f64,
    #[serde(default = "default_qp_tol")]
    pub qp_tol: f64,
    #[serde(default = "default_qp_max_iter")]
    pub qp_max_iter: usize,
}

fn default_qp_tol() -> f64 {
    crate::qp::DEFAULT_TOL
}

fn default_qp_max_iter() -> usize {
    crate::qp::DEFAULT_MAX_ITER
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            np: 10,
            ts: 0.033,
            q_diag: [1.0, 0.1, 0.5, 10.0, 5.0],
            r_diag: [1.0, 0.01],
            u_min: [-PI / 6.0, -10.0],
            u_max: [PI / 6.0, 15.0],
            du_min: [-PI / 12.0, -3.0],
            du_max: [PI / 12.0, 3.0],
            ye_bound: 0.3,
            slack_weight: 1e4,
            qp_tol: default_qp_tol(),
            qp_max_iter: default_qp_max_iter(),
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.np < 1 || !(self.ts > 0.0) {
            return Err(Error::Config(format!("Np = {}, Ts = {} must be positive", self.np, self.ts)));
        }
        if self.q_diag.iter().chain(&self.r_diag).any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("weights must be finite and nonnegative".into()));
        }
        for j in 0..NU {
            if !(self.u_min[j] < self.u_max[j]) {
                return Err(Error::InfeasibleBounds(format!("u_min[{j}] >= u_max[{j}]")));
            }
            if !(self.du_min[j] < self.du_max[j]) {
                return Err(Error::InfeasibleBounds(format!("du_min[{j}] >= du_max[{j}]")));
            }
        }
        if !(self.slack_weight > 0.0) || !(self.ye_bound > 0.0) {
            return Err(Error::Config("slack_weight and ye_bound must be positive".into()));
        }
        if !(self.qp_tol > 0.0) || self.qp_max_iter == 0 {
            return Err(Error::Config("qp_tol and qp_max_iter must be positive".into()));
        }
        Ok(())
    }

    pub fn with_weights(&self, q_diag: [f64; NX], r_diag: [f64; NU]) -> Self {
        Self { q_diag, r_diag, ..self.clone() }
    }

    /// Clamps `u` into the hard input bounds.
    pub fn clamp_input(&self, u: ControlInput) -> ControlInput {
        ControlInput::new(u.delta.clamp(self.u_min[0], self.u_max[0]), u.ax.clamp(self.u_min[1], self.u_max[1]))
    }

    pub fn clamp_increment(&self, du: ControlInput) -> ControlInput {
        ControlInput::new(
            du.delta.clamp(self.du_min[0], self.du_max[0]),
            du.ax.clamp(self.du_min[1], self.du_max[1]),
        )
    }
}

/// Reference for one predicted step: target speed and path curvature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub v_ref: f64,
    pub k: f64,
}

impl ReferencePoint {
    /// `[v_ref, 0, v_ref*k, 0, 0]`: curvature feedforward on the yaw rate.
    pub fn state_reference(&self) -> [f64; NX] {
        [self.v_ref, 0.0, self.v_ref * self.k, 0.0, 0.0]
    }
}

/// References for predicted states `x_1 .. x_Np`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceWindow {
    pub points: Vec<ReferencePoint>,
}

impl ReferenceWindow {
    pub fn constant(v_ref: f64, k: f64, np: usize) -> Self {
        Self { points: vec![ReferencePoint { v_ref, k }; np] }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn curvatures(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.k).collect()
    }
}

/// Dimension-generic description of one condensed MPC problem.
#[derive(Debug, Clone)]
pub struct CondenseInput<'a> {
    pub ad: &'a [DMatrix<f64>],
    pub bd: &'a [DMatrix<f64>],
    pub x0: DVector<f64>,
    /// Reference for `x_{i+1}`, one per step.
    pub refs: Vec<DVector<f64>>,
    pub u_prev: DVector<f64>,
    pub q_diag: DVector<f64>,
    pub r_diag: DVector<f64>,
    pub u_min: DVector<f64>,
    pub u_max: DVector<f64>,
    pub du_min: DVector<f64>,
    pub du_max: DVector<f64>,
    /// `(state index, bound)` of the softened state constraint.
    pub soft_bound: Option<(usize, f64)>,
    pub slack_weight: f64,
}

/// Condensed QP plus the affine prediction `x_i = c_i + S_i * dU` for
/// `i = 0..=Np`.
#[derive(Debug, Clone)]
pub struct CondensedQp {
    pub qp: QpProblem,
    pub free: Vec<DVector<f64>>,
    pub sensitivity: Vec<DMatrix<f64>>,
    pub nu: usize,
    pub np: usize,
}

impl CondensedQp {
    pub fn predict(&self, du: &DVector<f64>) -> Vec<DVector<f64>> {
        self.free.iter().zip(&self.sensitivity).map(|(c, s)| c + s * du).collect()
    }
}

pub fn condense_dense(inp: &CondenseInput<'_>) -> Result<CondensedQp> {
    let np = inp.ad.len();
    if np == 0 || inp.bd.len() != np || inp.refs.len() != np {
        return Err(Error::DimensionMismatch(format!(
            "{} state matrices, {} input matrices, {} references",
            np,
            inp.bd.len(),
            inp.refs.len()
        )));
    }
    let nx = inp.x0.len();
    let nu = inp.u_prev.len();
    let dims_ok = inp.ad.iter().all(|a| a.nrows() == nx && a.ncols() == nx)
        && inp.bd.iter().all(|b| b.nrows() == nx && b.ncols() == nu)
        && inp.refs.iter().all(|r| r.len() == nx)
        && inp.q_diag.len() == nx
        && [&inp.r_diag, &inp.u_min, &inp.u_max, &inp.du_min, &inp.du_max].iter().all(|v| v.len() == nu)
        && inp.soft_bound.map_or(true, |(i, _)| i < nx);
    if !dims_ok {
        return Err(Error::DimensionMismatch(format!("nx = {nx}, nu = {nu}")));
    }
    if inp.u_min.iter().zip(inp.u_max.iter()).any(|(l, u)| l > u)
        || inp.du_min.iter().zip(inp.du_max.iter()).any(|(l, u)| l > u)
    {
        return Err(Error::InfeasibleBounds("lower input bound above upper".into()));
    }

    let ndu = nu * np;
    let nz = ndu + 1;
    let slack = ndu;

    let mut free = Vec::with_capacity(np + 1);
    let mut sens = Vec::with_capacity(np + 1);
    free.push(inp.x0.clone());
    sens.push(DMatrix::zeros(nx, ndu));
    for i in 0..np {
        let c = &inp.ad[i] * &free[i] + &inp.bd[i] * &inp.u_prev;
        let mut s = &inp.ad[i] * &sens[i];
        // u_i = u_prev + sum_{j <= i} du_j
        for j in 0..=i {
            let mut block = s.view_mut((0, j * nu), (nx, nu));
            block += &inp.bd[i];
        }
        free.push(c);
        sens.push(s);
    }

    let mut h = DMatrix::zeros(nz, nz);
    let mut f = DVector::zeros(nz);
    for i in 1..=np {
        let s = &sens[i];
        let mut qs = s.clone();
        for (r, w) in inp.q_diag.iter().enumerate() {
            qs.row_mut(r).scale_mut(*w);
        }
        let err = &free[i] - &inp.refs[i - 1];
        let hq = s.transpose() * &qs;
        let mut hb = h.view_mut((0, 0), (ndu, ndu));
        hb += hq * 2.0;
        let fq = qs.transpose() * err;
        let mut fb = f.rows_mut(0, ndu);
        fb += fq * 2.0;
    }
    for i in 0..np {
        for j in 0..nu {
            h[(i * nu + j, i * nu + j)] += 2.0 * inp.r_diag[j];
        }
    }
    h[(slack, slack)] = 2.0 * inp.slack_weight;
    // exact symmetry
    let h = (&h + h.transpose()) * 0.5;

    let n_soft = if inp.soft_bound.is_some() { 2 * np } else { 0 };
    let rows = 4 * ndu + n_soft + 1;
    let mut g = DMatrix::zeros(rows, nz);
    let mut hv = DVector::zeros(rows);
    let mut row = 0;
    for i in 0..np {
        for j in 0..nu {
            let col = i * nu + j;
            g[(row, col)] = 1.0;
            hv[row] = inp.du_max[j];
            g[(row + 1, col)] = -1.0;
            hv[row + 1] = -inp.du_min[j];
            row += 2;
        }
    }
    for i in 0..np {
        for j in 0..nu {
            for k in 0..=i {
                g[(row, k * nu + j)] = 1.0;
                g[(row + 1, k * nu + j)] = -1.0;
            }
            hv[row] = inp.u_max[j] - inp.u_prev[j];
            hv[row + 1] = inp.u_prev[j] - inp.u_min[j];
            row += 2;
        }
    }
    if let Some((idx, bound)) = inp.soft_bound {
        for i in 1..=np {
            let srow = sens[i].row(idx);
            let c = free[i][idx];
            for col in 0..ndu {
                g[(row, col)] = srow[col];
                g[(row + 1, col)] = -srow[col];
            }
            g[(row, slack)] = -1.0;
            g[(row + 1, slack)] = -1.0;
            hv[row] = bound - c;
            hv[row + 1] = bound + c;
            row += 2;
        }
    }
    g[(row, slack)] = -1.0;
    hv[row] = 0.0;

    Ok(CondensedQp { qp: QpProblem::new(h, f, g, hv)?, free, sensitivity: sens, nu, np })
}

/// Condenses the vehicle MPC problem for the given per-step models.
pub fn condense(
    models: &[DiscreteModel],
    x0: &VehicleState,
    refs: &ReferenceWindow,
    u_prev: &ControlInput,
    cfg: &MpcConfig,
) -> Result<CondensedQp> {
    if models.len() != cfg.np || refs.len() != cfg.np {
        return Err(Error::DimensionMismatch(format!(
            "Np = {}, got {} models and {} references",
            cfg.np,
            models.len(),
            refs.len()
        )));
    }
    let ad: Vec<DMatrix<f64>> = models.iter().map(|m| DMatrix::from_column_slice(NX, NX, m.ad.as_slice())).collect();
    let bd: Vec<DMatrix<f64>> = models.iter().map(|m| DMatrix::from_column_slice(NX, NU, m.bd.as_slice())).collect();
    let inp = CondenseInput {
        ad: &ad,
        bd: &bd,
        x0: DVector::from_column_slice(x0.to_vector().as_slice()),
        refs: refs.points.iter().map(|p| DVector::from_row_slice(&p.state_reference())).collect(),
        u_prev: DVector::from_vec(vec![u_prev.delta, u_prev.ax]),
        q_diag: DVector::from_row_slice(&cfg.q_diag),
        r_diag: DVector::from_row_slice(&cfg.r_diag),
        u_min: DVector::from_row_slice(&cfg.u_min),
        u_max: DVector::from_row_slice(&cfg.u_max),
        du_min: DVector::from_row_slice(&cfg.du_min),
        du_max: DVector::from_row_slice(&cfg.du_max),
        soft_bound: Some((YE_INDEX, cfg.ye_bound)),
        slack_weight: cfg.slack_weight,
    };
    condense_dense(&inp)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    pub u0: ControlInput,
    pub du0: ControlInput,
    pub delta_u: Vec<ControlInput>,
    /// Absolute inputs `u_0 .. u_{Np-1}` implied by `delta_u`.
    pub inputs: Vec<ControlInput>,
    /// `Np + 1` predicted states starting at the measurement.
    pub predicted_states: Vec<VehicleState>,
    pub slack: f64,
    pub qp_iterations: usize,
    pub solve_time: f64,
    pub status: QpStatus,
}

impl MpcSolution {
    pub fn trajectory(&self) -> PredictedTrajectory {
        PredictedTrajectory { states: self.predicted_states.clone(), inputs: self.inputs.clone() }
    }
}

/// Per-step discrete models scheduled on the previous prediction.
pub fn horizon_models(
    x: &VehicleState,
    stiff: &StiffnessPair,
    refs: &ReferenceWindow,
    prev: Option<&MpcSolution>,
    cfg: &MpcConfig,
    params: &VehicleParams,
) -> Result<Vec<DiscreteModel>> {
    let traj = prev.map(MpcSolution::trajectory);
    schedule_horizon(traj.as_ref(), x, &refs.curvatures())
        .iter()
        .map(|psi| build_lpv(psi, stiff, params).map(|m| discretize_euler(&m, cfg.ts)))
        .collect()
}

/// One receding-horizon step: schedule, build, condense, solve, and return
/// the first input.
pub fn mpc_step(
    x: &VehicleState,
    stiff: &StiffnessPair,
    refs: &ReferenceWindow,
    u_prev: &ControlInput,
    prev: Option<&MpcSolution>,
    cfg: &MpcConfig,
    params: &VehicleParams,
) -> Result<MpcSolution> {
    let start = Instant::now();
    if !x.is_finite() {
        return Err(Error::Config(format!("non-finite state {x:?}")));
    }
    let models = horizon_models(x, stiff, refs, prev, cfg, params)?;
    let condensed = condense(&models, x, refs, u_prev, cfg)?;
    let ndu = NU * cfg.np;

    let (du, slack, iterations, status) = match solve_qp(&condensed.qp, cfg.qp_tol, cfg.qp_max_iter) {
        Ok(sol) => {
            if sol.status == QpStatus::MaxIter {
                log::warn!("MPC QP hit max_iter, using best iterate");
            }
            (sol.z.rows(0, ndu).into_owned(), sol.z[ndu].max(0.0), sol.iterations, sol.status)
        }
        Err(Error::Infeasible) => {
            log::warn!("MPC QP infeasible, holding previous input");
            (DVector::zeros(ndu), 0.0, 0, QpStatus::InfeasibleRelaxed)
        }
        Err(e) => return Err(e),
    };

    let mut delta_u = Vec::with_capacity(cfg.np);
    let mut inputs = Vec::with_capacity(cfg.np);
    let mut u = *u_prev;
    for i in 0..cfg.np {
        let d = ControlInput::new(du[i * NU], du[i * NU + 1]);
        u = ControlInput::new(u.delta + d.delta, u.ax + d.ax);
        delta_u.push(d);
        inputs.push(u);
    }
    let predicted_states = condensed
        .predict(&du)
        .iter()
        .map(|v| VehicleState::new(v[0], v[1], v[2], v[3], v[4]))
        .collect();

    let u0 = cfg.clamp_input(inputs[0]);
    let du0 = cfg.clamp_increment(ControlInput::new(u0.delta - u_prev.delta, u0.ax - u_prev.ax));
    let u0 = cfg.clamp_input(ControlInput::new(u_prev.delta + du0.delta, u_prev.ax + du0.ax));

    Ok(MpcSolution {
        u0,
        du0,
        delta_u,
        inputs,
        predicted_states,
        slack,
        qp_iterations: iterations,
        solve_time: start.elapsed().as_secs_f64(),
        status,
    })
}
