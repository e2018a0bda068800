//! Linear parameter varying prediction model.
//!
//! `A(psi)` and `B(psi)` factor the single-track dynamics with a linear tire
//! so that `A(psi) x + B(psi) u` reproduces the nonlinear derivative exactly
//! whenever `psi` is built from the same `x` and `u`.

use nalgebra::{Matrix5, SMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vehicle::{Axle, ControlInput, PacejkaCoeffs, VehicleParams, VehicleState, GEOMETRY_EPS};

pub type Matrix5x2 = SMatrix<f64, 5, 2>;

/// Speed floor applied to every `1/vx` term.
pub const VX_MIN: f64 = 0.1;
pub const STIFFNESS_MIN: f64 = 1e4;
pub const STIFFNESS_MAX: f64 = 2e5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulingVector {
    pub delta: f64,
    pub vx: f64,
    pub vy: f64,
    pub theta_e: f64,
    pub ye: f64,
    pub k: f64,
}

impl SchedulingVector {
    pub fn from_state(x: &VehicleState, delta: f64, k: f64) -> Self {
        Self { delta, vx: x.vx, vy: x.vy, theta_e: x.theta_e, ye: x.ye, k }
    }
}

/// Front/rear cornering stiffness in N/rad.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StiffnessPair {
    pub cf: f64,
    pub cr: f64,
}

impl StiffnessPair {
    /// Clamped into `[STIFFNESS_MIN, STIFFNESS_MAX]`; NaN maps to the lower bound.
    pub fn clamped(cf: f64, cr: f64) -> Self {
        Self { cf: clamp_stiffness(cf), cr: clamp_stiffness(cr) }
    }

    /// The small-angle tire slopes, i.e. what a linear tire model would use.
    pub fn nominal(coeffs: &PacejkaCoeffs) -> Self {
        Self::clamped(coeffs.small_angle_slope(Axle::Front), coeffs.small_angle_slope(Axle::Rear))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::clamped(self.cf * factor, self.cr * factor)
    }
}

pub fn clamp_stiffness(c: f64) -> f64 {
    if c.is_nan() {
        STIFFNESS_MIN
    } else {
        c.clamp(STIFFNESS_MIN, STIFFNESS_MAX)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpvMatrices {
    pub a: Matrix5<f64>,
    pub b: Matrix5x2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteModel {
    pub ad: Matrix5<f64>,
    pub bd: Matrix5x2,
    pub ts: f64,
}

pub fn build_lpv(psi: &SchedulingVector, stiff: &StiffnessPair, params: &VehicleParams) -> Result<LpvMatrices> {
    let finite = [psi.delta, psi.vx, psi.vy, psi.theta_e, psi.ye, psi.k].iter().all(|v| v.is_finite());
    if !finite {
        return Err(Error::DegenerateScheduling(format!("non-finite entry in {psi:?}")));
    }
    let denom = 1.0 - psi.ye * psi.k;
    if denom.abs() <= GEOMETRY_EPS {
        return Err(Error::DegenerateScheduling(format!("|1 - ye*k| = {:e}", denom.abs())));
    }

    let VehicleParams { m, i: inertia, lf, lr, cd: drag_coeff, a: area, rho, mu, g, .. } = *params;
    let StiffnessPair { cf, cr } = *stiff;
    let vx = psi.vx.max(VX_MIN);
    let vy = psi.vy;
    let (sd, cd) = psi.delta.sin_cos();
    let (st, ct) = psi.theta_e.sin_cos();
    let k = psi.k;

    let mut a = Matrix5::zeros();
    a[(0, 0)] = -mu * g / vx - rho * drag_coeff * area * vx / (2.0 * m);
    a[(0, 1)] = cf * sd / (m * vx);
    a[(0, 2)] = cf * lf * sd / (m * vx) + vy;
    a[(1, 1)] = -(cr + cf * cd) / (m * vx);
    a[(1, 2)] = -(cf * lf * cd - cr * lr) / (m * vx) - vx;
    a[(2, 1)] = -(cf * lf * cd - cr * lr) / (inertia * vx);
    a[(2, 2)] = -(cf * lf * lf * cd + cr * lr * lr) / (inertia * vx);
    a[(3, 0)] = st;
    a[(3, 1)] = ct;
    a[(4, 0)] = -k * ct / denom;
    a[(4, 1)] = k * st / denom;
    a[(4, 2)] = 1.0;

    let mut b = Matrix5x2::zeros();
    b[(0, 0)] = -cf * sd / m;
    b[(0, 1)] = 1.0;
    b[(1, 0)] = cf * cd / m;
    b[(2, 0)] = cf * lf * cd / inertia;

    Ok(LpvMatrices { a, b })
}

/// Forward-Euler discretization: `Ad = I + A*Ts`, `Bd = B*Ts`.
pub fn discretize_euler(m: &LpvMatrices, ts: f64) -> DiscreteModel {
    DiscreteModel { ad: Matrix5::identity() + m.a * ts, bd: m.b * ts, ts }
}

/// A prediction made by the previous controller iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedTrajectory {
    /// `Np + 1` states, index 0 being the state the prediction started from.
    pub states: Vec<VehicleState>,
    /// `Np` inputs.
    pub inputs: Vec<ControlInput>,
}

/// Scheduling vectors for each of the `curvatures.len()` horizon steps.
///
/// With a previous prediction, step `i` is scheduled on that prediction's
/// step `i + 1` (the last input repeated at the tail). On a cold start the
/// measured state with zero steering is used throughout.
pub fn schedule_horizon(
    prev: Option<&PredictedTrajectory>,
    measured: &VehicleState,
    curvatures: &[f64],
) -> Vec<SchedulingVector> {
    let np = curvatures.len();
    match prev {
        Some(p) if p.states.len() > np && p.inputs.len() >= np && np > 0 => curvatures
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let x = &p.states[i + 1];
                let u = p.inputs[(i + 1).min(p.inputs.len() - 1)];
                SchedulingVector::from_state(x, u.delta, k)
            })
            .collect(),
        _ => curvatures.iter().map(|&k| SchedulingVector::from_state(measured, 0.0, k)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_psi() -> SchedulingVector {
        SchedulingVector { delta: 0.03, vx: 10.0, vy: 0.5, theta_e: 0.02, ye: 0.05, k: 0.01 }
    }

    #[test]
    fn zero_steer_zeroes_coupling_terms() {
        let psi = SchedulingVector { delta: 0.0, ..reference_psi() };
        let m = build_lpv(&psi, &StiffnessPair { cf: 1.2e5, cr: 1.1e5 }, &VehicleParams::default()).unwrap();
        assert_eq!(m.b[(0, 0)], 0.0);
        assert_eq!(m.a[(0, 1)], 0.0);
        assert_eq!(m.a[(0, 2)] - psi.vy, 0.0);
    }

    #[test]
    fn straight_aligned_error_rows() {
        let psi = SchedulingVector { theta_e: 0.0, k: 0.0, ..reference_psi() };
        let m = build_lpv(&psi, &StiffnessPair { cf: 1.2e5, cr: 1.1e5 }, &VehicleParams::default()).unwrap();
        assert_eq!(m.a[(3, 0)], 0.0);
        assert_eq!(m.a[(3, 1)], 1.0);
        assert_eq!(m.a[(4, 0)], 0.0);
        assert_eq!(m.a[(4, 1)], 0.0);
    }

    #[test]
    fn reference_matrices_match_hand_evaluation() {
        // 30-digit evaluation of each entry for psi = (0.03, 10, 0.5, 0.02, 0.05, 0.01),
        // Cf = Cr = 1.2e5 and the default vehicle.
        let m = build_lpv(&reference_psi(), &StiffnessPair { cf: 1.2e5, cr: 1.2e5 }, &VehicleParams::default())
            .unwrap();
        let expect_a = [
            (0, 0, -0.806_224_444_444_444_444),
            (0, 1, 0.228_537_144_399_966_939),
            (0, 2, 0.774_244_573_279_960_327),
            (1, 1, -15.234_666_923_801_809_6),
            (1, 2, -6.948_266_975_228_838_24),
            (2, 1, 1.671_818_961_396_375_57),
            (2, 2, -16.692_947_681_106_958),
            (3, 0, 0.019_998_666_693_333_079_4),
            (3, 1, 0.999_800_006_666_577_778),
            (4, 0, -0.010_003_001_567_449_502_5),
            (4, 1, 0.000_200_086_710_288_475_031),
            (4, 2, 1.0),
        ];
        let expect_b = [
            (0, 0, -2.285_371_443_999_669_39),
            (0, 1, 1.0),
            (1, 0, 76.156_193_047_541_906),
            (2, 0, 50.064_419_081_688_418_2),
        ];
        let mut seen_a = Matrix5::<bool>::from_element(false);
        for (r, c, v) in expect_a {
            assert!((m.a[(r, c)] - v).abs() <= 1e-12 * v.abs().max(1.0), "A[{r},{c}] = {} vs {v}", m.a[(r, c)]);
            seen_a[(r, c)] = true;
        }
        for r in 0..5 {
            for c in 0..5 {
                if !seen_a[(r, c)] {
                    assert_eq!(m.a[(r, c)], 0.0, "A[{r},{c}] should be structurally zero");
                }
            }
        }
        let mut nonzero_b = 0;
        for (r, c, v) in expect_b {
            assert!((m.b[(r, c)] - v).abs() <= 1e-12 * v.abs().max(1.0), "B[{r},{c}]");
        }
        for v in m.b.iter() {
            if *v != 0.0 {
                nonzero_b += 1;
            }
        }
        assert_eq!(nonzero_b, 4);
    }

    #[test]
    fn low_speed_is_floored() {
        let psi = SchedulingVector { vx: 0.0, ..reference_psi() };
        let floored = SchedulingVector { vx: VX_MIN, ..reference_psi() };
        let s = StiffnessPair { cf: 5e4, cr: 5e4 };
        let p = VehicleParams::default();
        assert_eq!(build_lpv(&psi, &s, &p).unwrap(), build_lpv(&floored, &s, &p).unwrap());
    }

    #[test]
    fn degenerate_scheduling_rejected() {
        let s = StiffnessPair { cf: 5e4, cr: 5e4 };
        let p = VehicleParams::default();
        let psi = SchedulingVector { ye: 10.0, k: 0.1, ..reference_psi() };
        assert!(matches!(build_lpv(&psi, &s, &p), Err(Error::DegenerateScheduling(_))));
        let psi = SchedulingVector { vy: f64::NAN, ..reference_psi() };
        assert!(build_lpv(&psi, &s, &p).is_err());
    }

    #[test]
    fn euler_discretization() {
        let zero = LpvMatrices { a: Matrix5::zeros(), b: Matrix5x2::zeros() };
        let d = discretize_euler(&zero, 0.033);
        assert_eq!(d.ad, Matrix5::identity());
        assert_eq!(d.bd, Matrix5x2::zeros());

        let mut a = Matrix5::zeros();
        a[(2, 2)] = -1.0;
        let d = discretize_euler(&LpvMatrices { a, b: Matrix5x2::zeros() }, 0.033);
        assert!((d.ad[(2, 2)] - 0.967).abs() < 1e-15);

        let m = build_lpv(&reference_psi(), &StiffnessPair { cf: 1e5, cr: 9e4 }, &VehicleParams::default()).unwrap();
        let doubled = LpvMatrices { a: m.a * 2.0, b: m.b };
        let lhs = discretize_euler(&doubled, 0.033).ad - Matrix5::identity();
        let rhs = (discretize_euler(&m, 0.033).ad - Matrix5::identity()) * 2.0;
        assert!((lhs - rhs).amax() < 1e-14);
    }

    #[test]
    fn stiffness_clamp() {
        let s = StiffnessPair::clamped(10.0, 1e9);
        assert_eq!(s, StiffnessPair { cf: STIFFNESS_MIN, cr: STIFFNESS_MAX });
        assert_eq!(clamp_stiffness(f64::NAN), STIFFNESS_MIN);
    }

    #[test]
    fn cold_start_schedule_repeats_measurement() {
        let x = VehicleState::new(12.0, 0.1, 0.02, 0.03, 0.01);
        let ks = [0.01, 0.02, 0.0];
        let sched = schedule_horizon(None, &x, &ks);
        assert_eq!(sched.len(), 3);
        for (s, k) in sched.iter().zip(ks) {
            assert_eq!(*s, SchedulingVector::from_state(&x, 0.0, k));
        }
    }

    #[test]
    fn warm_schedule_is_shifted_prediction() {
        let np = 4;
        let states: Vec<_> = (0..=np).map(|i| VehicleState::new(10.0 + i as f64, 0.1 * i as f64, 0.0, 0.0, 0.0)).collect();
        let inputs: Vec<_> = (0..np).map(|i| ControlInput::new(0.01 * i as f64, 0.0)).collect();
        let prev = PredictedTrajectory { states: states.clone(), inputs: inputs.clone() };
        let sched = schedule_horizon(Some(&prev), &states[0], &vec![0.0; np]);
        for i in 0..np - 1 {
            assert_eq!(sched[i].vx, states[i + 1].vx);
            assert_eq!(sched[i].delta, inputs[i + 1].delta);
        }
        assert_eq!(sched[np - 1].delta, inputs[np - 1].delta);
        assert_eq!(sched[np - 1].vx, states[np].vx);

        let constant = PredictedTrajectory { states: vec![states[0]; np + 1], inputs: vec![inputs[1]; np] };
        let sched = schedule_horizon(Some(&constant), &states[0], &vec![0.0; np]);
        assert!(sched.windows(2).all(|w| w[0] == w[1]));
    }
}
