//! Nonlinear single-track vehicle plant.
//!
//! Longitudinal, lateral and yaw dynamics with Pacejka lateral tire forces,
//! rolling plus aerodynamic drag (wind enters as headwind airspeed) and the
//! path-frame tracking errors `ye`, `theta_e`. This is the ground truth every
//! closed-loop experiment runs against.

use std::f64::consts::PI;

use nalgebra::SVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this speed the drag force is zero so a parked car stays parked.
pub const V_STOP: f64 = 0.1;

/// Tolerance on `|1 - ye*k|` below which the Frenet error dynamics are singular.
pub const GEOMETRY_EPS: f64 = 1e-6;

pub type Vector5 = SVector<f64, 5>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleParams {
    pub m: f64,
    #[serde(rename = "I")]
    pub i: f64,
    pub lf: f64,
    pub lr: f64,
    #[serde(rename = "Cd")]
    pub cd: f64,
    #[serde(rename = "A")]
    pub a: f64,
    pub rho: f64,
    pub mu: f64,
    pub g: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    1e-3
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            m: 1575.0,
            i: 2875.0,
            lf: 1.2,
            lr: 1.6,
            cd: 0.29,
            a: 1.6,
            rho: 1.225,
            mu: 0.82,
            g: 9.81,
            eps: 1e-3,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.m > 0.0
            && self.i > 0.0
            && self.lf > 0.0
            && self.lr > 0.0
            && self.rho > 0.0
            && self.a > 0.0
            && self.mu > 0.0
            && self.mu <= 1.5
            && self.eps > 0.0
            && self.cd >= 0.0
            && self.g > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid vehicle parameters: {self:?}")))
        }
    }

    pub fn wheelbase(&self) -> f64 {
        self.lf + self.lr
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
    pub ye: f64,
    pub theta_e: f64,
}

impl VehicleState {
    pub fn new(vx: f64, vy: f64, omega: f64, ye: f64, theta_e: f64) -> Self {
        Self { vx, vy, omega, ye, theta_e }
    }

    pub fn to_vector(&self) -> Vector5 {
        Vector5::new(self.vx, self.vy, self.omega, self.ye, self.theta_e)
    }

    pub fn from_vector(v: &Vector5) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4])
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub delta: f64,
    pub ax: f64,
}

impl ControlInput {
    pub fn new(delta: f64, ax: f64) -> Self {
        Self { delta, ax }
    }
}

/// Time derivative of [`VehicleState`], same field order.
pub type StateDerivative = VehicleState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axle {
    Front,
    Rear,
}

/// Magic-formula lateral tire coefficients. The peak force per axle is
/// `mu * Fz(axle)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacejkaCoeffs {
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub mu: f64,
    #[serde(rename = "Fz_front")]
    pub fz_front: f64,
    #[serde(rename = "Fz_rear")]
    pub fz_rear: f64,
}

impl PacejkaCoeffs {
    pub const DEFAULT_B: f64 = 10.0;
    pub const DEFAULT_C: f64 = 1.9;

    /// Static axle loads from the CoG position.
    pub fn from_params(params: &VehicleParams, b: f64, c: f64) -> Self {
        let weight = params.m * params.g;
        let l = params.wheelbase();
        Self {
            b,
            c,
            mu: params.mu,
            fz_front: weight * params.lr / l,
            fz_rear: weight * params.lf / l,
        }
    }

    pub fn default_for(params: &VehicleParams) -> Self {
        Self::from_params(params, Self::DEFAULT_B, Self::DEFAULT_C)
    }

    pub fn peak(&self, axle: Axle) -> f64 {
        match axle {
            Axle::Front => self.mu * self.fz_front,
            Axle::Rear => self.mu * self.fz_rear,
        }
    }

    /// dF/dalpha at alpha = 0, i.e. `B*C*D`.
    pub fn small_angle_slope(&self, axle: Axle) -> f64 {
        self.b * self.c * self.peak(axle)
    }

    pub fn validate(&self, params: &VehicleParams) -> Result<()> {
        let weight = params.m * params.g;
        let load_err = ((self.fz_front + self.fz_rear) - weight).abs() / weight;
        if !(self.b > 0.0 && self.c > 1.0 && self.c < 3.0 && self.mu > 0.0)
            || self.fz_front <= 0.0
            || self.fz_rear <= 0.0
            || load_err > 1e-6
        {
            return Err(Error::Config(format!("invalid tire coefficients: {self:?}")));
        }
        Ok(())
    }
}

/// Front and rear slip angles.
///
/// Signs follow the convention under which the LPV factorization in
/// [`crate::lpv`] is exact: `alpha_f = delta - atan((vy + lf*w)/(vx+eps))`,
/// `alpha_r = -atan((vy - lr*w)/(vx+eps))`.
pub fn slip_angles(state: &VehicleState, delta: f64, params: &VehicleParams) -> (f64, f64) {
    let v = state.vx + params.eps;
    let alpha_f = delta - ((state.vy + params.lf * state.omega) / v).atan();
    let alpha_r = -((state.vy - params.lr * state.omega) / v).atan();
    (alpha_f, alpha_r)
}

pub fn pacejka_force(alpha: f64, coeffs: &PacejkaCoeffs, axle: Axle) -> f64 {
    coeffs.peak(axle) * (coeffs.c * (coeffs.b * alpha).atan()).sin()
}

/// Rolling plus aerodynamic drag; `wind_speed` is a headwind added to the
/// airspeed. Zero below [`V_STOP`].
pub fn drag_force(vx: f64, wind_speed: f64, params: &VehicleParams) -> f64 {
    if vx < V_STOP {
        return 0.0;
    }
    let airspeed = vx + wind_speed;
    params.mu * params.m * params.g + 0.5 * params.rho * params.cd * params.a * airspeed * airspeed
}

pub fn plant_derivative(
    state: &VehicleState,
    u: &ControlInput,
    k: f64,
    wind: f64,
    params: &VehicleParams,
    coeffs: &PacejkaCoeffs,
) -> Result<StateDerivative> {
    let denom = 1.0 - state.ye * k;
    if denom.abs() <= GEOMETRY_EPS {
        return Err(Error::SingularGeometry(denom.abs()));
    }
    let VehicleState { vx, vy, omega, ye: _, theta_e } = *state;
    let (alpha_f, alpha_r) = slip_angles(state, u.delta, params);
    let fyf = pacejka_force(alpha_f, coeffs, Axle::Front);
    let fyr = pacejka_force(alpha_r, coeffs, Axle::Rear);
    let fd = drag_force(vx, wind, params);
    let (sd, cd) = u.delta.sin_cos();
    let (st, ct) = theta_e.sin_cos();

    Ok(StateDerivative {
        vx: u.ax + omega * vy - (fyf * sd + fd) / params.m,
        vy: (fyf * cd + fyr) / params.m - omega * vx,
        omega: (fyf * params.lf * cd - fyr * params.lr) / params.i,
        ye: vx * st + vy * ct,
        theta_e: omega - k * (vx * ct - vy * st) / denom,
    })
}

fn axpy(x: &VehicleState, h: f64, d: &StateDerivative) -> VehicleState {
    VehicleState::from_vector(&(x.to_vector() + d.to_vector() * h))
}

/// One classical RK4 step with zero-order-hold `u`, `k` and `wind`.
///
/// After the step `vx` is floored at zero and `theta_e` wrapped to `(-pi, pi]`.
#[allow(clippy::too_many_arguments)]
pub fn step_rk4(
    state: &VehicleState,
    u: &ControlInput,
    k: f64,
    wind: f64,
    params: &VehicleParams,
    coeffs: &PacejkaCoeffs,
    dt: f64,
) -> Result<VehicleState> {
    let f = |x: &VehicleState| plant_derivative(x, u, k, wind, params, coeffs);
    let k1 = f(state)?;
    let k2 = f(&axpy(state, 0.5 * dt, &k1))?;
    let k3 = f(&axpy(state, 0.5 * dt, &k2))?;
    let k4 = f(&axpy(state, dt, &k3))?;
    let incr = (k1.to_vector() + 2.0 * k2.to_vector() + 2.0 * k3.to_vector() + k4.to_vector())
        * (dt / 6.0);
    let mut next = VehicleState::from_vector(&(state.to_vector() + incr));
    next.vx = next.vx.max(0.0);
    next.theta_e = wrap_angle(next.theta_e);
    Ok(next)
}

pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> VehicleParams {
        VehicleParams::default()
    }

    #[test]
    fn zero_motion_has_zero_slip() {
        let s = VehicleState::new(10.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(slip_angles(&s, 0.0, &params()), (0.0, 0.0));
    }

    #[test]
    fn slip_angles_reference_point() {
        // reference values from 30-digit evaluation of the same formulas
        let s = VehicleState::new(10.0, 0.5, 0.2, 0.0, 0.0);
        let (af, ar) = slip_angles(&s, 0.05, &params());
        assert!((af - (-0.023_858_008_439_718_156)).abs() < 1e-14, "{af}");
        assert!((ar - (-0.017_996_257_140_702_704)).abs() < 1e-14, "{ar}");
    }

    #[test]
    fn pacejka_slope_at_origin() {
        let p = params();
        let c = PacejkaCoeffs::default_for(&p);
        assert!((c.fz_front - 8829.0).abs() < 0.1);
        assert!((c.peak(Axle::Front) - 7239.8).abs() < 0.1);
        let h = 1e-6;
        let fd = (pacejka_force(h, &c, Axle::Front) - pacejka_force(-h, &c, Axle::Front)) / (2.0 * h);
        let analytic = c.small_angle_slope(Axle::Front);
        assert!((analytic - 137_557.0).abs() < 5.0, "{analytic}");
        assert!((fd - analytic).abs() / analytic < 1e-6);
        assert_eq!(pacejka_force(0.0, &c, Axle::Rear), 0.0);
    }

    #[test]
    fn drag_reference_values() {
        let p = params();
        assert_eq!(drag_force(0.0, 0.0, &p), 0.0);
        assert_eq!(drag_force(0.05, 40.0, &p), 0.0);
        let rolling: f64 = 0.82 * 1575.0 * 9.81;
        assert!((rolling - 12_669.615).abs() < 1e-3);
        let f10 = drag_force(10.0, 0.0, &p);
        assert!((f10 - 12_698.035).abs() < 1e-2, "{f10}");
        let aero10 = f10 - rolling;
        let aero35 = drag_force(10.0, 25.0, &p) - rolling;
        assert!((aero35 / aero10 - 12.25).abs() < 1e-9);
    }

    #[test]
    fn straight_line_derivative() {
        let p = params();
        let c = PacejkaCoeffs::default_for(&p);
        let s = VehicleState::new(10.0, 0.0, 0.0, 0.0, 0.0);
        let d = plant_derivative(&s, &ControlInput::new(0.0, 1.5), 0.0, 0.0, &p, &c).unwrap();
        assert_eq!(d.vy, 0.0);
        assert_eq!(d.omega, 0.0);
        assert_eq!(d.ye, 0.0);
        assert_eq!(d.theta_e, 0.0);
        assert!((d.vx - (1.5 - drag_force(10.0, 0.0, &p) / p.m)).abs() < 1e-12);
    }

    #[test]
    fn singular_geometry_is_reported() {
        let p = params();
        let c = PacejkaCoeffs::default_for(&p);
        let s = VehicleState::new(10.0, 0.0, 0.0, 2.0, 0.0);
        let err = plant_derivative(&s, &ControlInput::default(), 0.5, 0.0, &p, &c);
        assert!(matches!(err, Err(Error::SingularGeometry(_))));
    }

    #[test]
    fn heading_rate_on_path_ignores_denominator() {
        let p = params();
        let c = PacejkaCoeffs::default_for(&p);
        let s = VehicleState::new(12.0, 0.3, 0.1, 0.0, 0.05);
        let k = 0.03;
        let d = plant_derivative(&s, &ControlInput::new(0.02, 0.0), k, 0.0, &p, &c).unwrap();
        let expect = 0.1 - k * (12.0 * 0.05f64.cos() - 0.3 * 0.05f64.sin());
        assert!((d.theta_e - expect).abs() < 1e-14);
    }

    #[test]
    fn rk4_fixed_point_and_floor() {
        let p = params();
        let c = PacejkaCoeffs::default_for(&p);
        let rest = VehicleState::default();
        let next = step_rk4(&rest, &ControlInput::default(), 0.0, 30.0, &p, &c, 0.01).unwrap();
        assert_eq!(next, rest);

        let slow = VehicleState::new(0.2, 0.0, 0.0, 0.0, 0.0);
        let next = step_rk4(&slow, &ControlInput::new(0.0, -50.0), 0.0, 0.0, &p, &c, 0.1).unwrap();
        assert_eq!(next.vx, 0.0);
    }

    #[test]
    fn wrap_angle_range() {
        for a in [-7.0, -PI, -1.0, 0.0, 3.0, PI, 4.0, 10.0] {
            let w = wrap_angle(a);
            assert!(w > -PI && w <= PI);
            assert!(((a - w) / (2.0 * PI)).fract().abs() < 1e-12 || ((a - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-12);
        }
    }
}
