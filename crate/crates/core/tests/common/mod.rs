//! Shared fixtures and independent oracles for the integration tests.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use lpvmpc::lpv::StiffnessPair;
use lpvmpc::mpc::{condense, horizon_models, MpcConfig, ReferencePoint, ReferenceWindow};
use lpvmpc::qp::QpProblem;
use lpvmpc::vehicle::{ControlInput, VehicleParams, VehicleState};

/// Projected-gradient oracle for strictly convex QPs.
///
/// Runs accelerated projected gradient with adaptive restart on the
/// Jacobi-scaled dual `min_{l >= 0} 1/2 l'Ml + c'l`, `M = G H^-1 G'`,
/// `c = h + G H^-1 f`, and maps back through `z = -H^-1 (f + G'l)`. Every
/// 100 steps a few candidate active sets read off the iterate are polished
/// with an equality-constrained KKT solve. The first point that meets the
/// KKT conditions to the relative tolerance `tol` is returned.
pub fn dual_projected_gradient(qp: &QpProblem, tol: f64, max_iter: usize) -> DVector<f64> {
    let hinv = qp.h.clone().try_inverse().expect("oracle needs an invertible H");
    let z_of = |lam: &DVector<f64>| -(&hinv * (&qp.f + qp.g.transpose() * lam));
    let m_rows = qp.g.nrows();
    if m_rows == 0 {
        return z_of(&DVector::zeros(0));
    }
    let m = &qp.g * &hinv * qp.g.transpose();
    let m = (&m + m.transpose()) * 0.5;
    let c = &qp.hvec + &qp.g * (&hinv * &qp.f);
    // Substitute l = D mu with D = diag(M)^-1/2; mu >= 0 iff l >= 0.
    let d = DVector::from_iterator(m_rows, (0..m_rows).map(|i| 1.0 / m[(i, i)].max(1e-300).sqrt()));
    let ms = DMatrix::from_fn(m_rows, m_rows, |i, j| d[i] * m[(i, j)] * d[j]);
    let cs = c.component_mul(&d);
    let lip = SymmetricEigen::new(ms.clone()).eigenvalues.max().max(1e-300);
    let step = 1.0 / lip;

    let project = |v: DVector<f64>| v.map(|x| x.max(0.0));
    let dual_obj = |mu: &DVector<f64>| 0.5 * mu.dot(&(&ms * mu)) + cs.dot(mu);
    let kkt_ok = |z: &DVector<f64>, lam: &DVector<f64>| {
        let slack = &qp.hvec - &qp.g * z;
        let primal = slack.iter().fold(0.0f64, |a, s| a.max(-s));
        let comp = slack.iter().zip(lam.iter()).fold(0.0f64, |a, (s, l)| a.max((s * l).abs()));
        let h_scale = 1.0 + qp.hvec.amax();
        primal <= tol * h_scale && comp <= tol * h_scale * (1.0 + lam.amax()) && lam.iter().all(|&l| l >= 0.0)
    };
    let mut mu = DVector::zeros(m_rows);
    let mut y = mu.clone();
    let mut t: f64 = 1.0;
    let mut prev_obj = dual_obj(&mu);
    for it in 0..max_iter {
        let mut next = project(&y - (&ms * &y + &cs) * step);
        let mut obj = dual_obj(&next);
        if obj > prev_obj {
            // Restart momentum and take a plain projected step instead.
            t = 1.0;
            next = project(&mu - (&ms * &mu + &cs) * step);
            obj = dual_obj(&next);
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &next + (&next - &mu) * ((t - 1.0) / t_next);
        mu = next;
        t = t_next;
        prev_obj = obj;
        if it % 100 == 0 {
            let lam = mu.component_mul(&d);
            let z = z_of(&lam);
            if kkt_ok(&z, &lam) {
                return z;
            }
            let slack = &qp.hvec - &qp.g * &z;
            let scale = lam.amax().max(1e-300);
            let candidates = [
                support(&lam, |i| lam[i] > 1e-9 * scale),
                support(&lam, |i| lam[i] > 1e-6 * scale),
                support(&lam, |i| lam[i] > 1e-3 * scale),
                support(&lam, |i| slack[i].abs() < 1e-7 * (1.0 + qp.hvec[i].abs())),
            ];
            for act in &candidates {
                if let Some((zp, lp)) = polish(qp, act) {
                    if kkt_ok(&zp, &lp) {
                        return zp;
                    }
                }
            }
        }
    }
    z_of(&mu.component_mul(&d))
}

fn support(lam: &DVector<f64>, keep: impl Fn(usize) -> bool) -> Vec<usize> {
    (0..lam.len()).filter(|&i| keep(i)).collect()
}

/// Solves the KKT system with the rows in `act` held as equalities.
fn polish(qp: &QpProblem, act: &[usize]) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = qp.f.len();
    let k = act.len();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.h);
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-&qp.f));
    for (r, &i) in act.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = qp.g[(i, j)];
            kkt[(j, n + r)] = qp.g[(i, j)];
        }
        rhs[n + r] = qp.hvec[i];
    }
    let sol = kkt.lu().solve(&rhs)?;
    let z = sol.rows(0, n).into_owned();
    let mut full = DVector::zeros(qp.hvec.len());
    for (r, &i) in act.iter().enumerate() {
        full[i] = sol[n + r];
    }
    Some((z, full))
}

/// Linear-tire single-track derivative, written out term by term: tire
/// forces `C * alpha` with the slip ratios taken without `atan`, and no
/// wind. Used to check the LPV factorization.
pub fn linear_tire_derivative(
    x: &VehicleState,
    u: &ControlInput,
    k: f64,
    stiff: &StiffnessPair,
    p: &VehicleParams,
) -> [f64; 5] {
    let alpha_f = u.delta - (x.vy + p.lf * x.omega) / x.vx;
    let alpha_r = -(x.vy - p.lr * x.omega) / x.vx;
    let fyf = stiff.cf * alpha_f;
    let fyr = stiff.cr * alpha_r;
    let drag = p.mu * p.m * p.g + 0.5 * p.rho * p.cd * p.a * x.vx * x.vx;
    [
        u.ax + x.omega * x.vy - (fyf * u.delta.sin() + drag) / p.m,
        (fyf * u.delta.cos() + fyr) / p.m - x.omega * x.vx,
        (fyf * p.lf * u.delta.cos() - fyr * p.lr) / p.i,
        x.vx * x.theta_e.sin() + x.vy * x.theta_e.cos(),
        x.omega - k * (x.vx * x.theta_e.cos() - x.vy * x.theta_e.sin()) / (1.0 - x.ye * k),
    ]
}

/// Random condensed MPC problem, including configurations that drive
/// inputs, increments and the soft lateral bound active.
pub fn random_condensed_qp<R: Rng>(rng: &mut R, np: usize) -> QpProblem {
    let params = VehicleParams::default();
    let mut cfg = MpcConfig { np, ..MpcConfig::default() };
    for q in cfg.q_diag.iter_mut() {
        *q = 10f64.powf(rng.gen_range(-4.0..1.0));
    }
    for r in cfg.r_diag.iter_mut() {
        *r = 10f64.powf(rng.gen_range(-3.0..0.0));
    }
    let x = VehicleState::new(
        rng.gen_range(3.0..25.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-0.5..0.5),
        rng.gen_range(-0.45..0.45),
        rng.gen_range(-0.3..0.3),
    );
    let stiff = StiffnessPair::clamped(rng.gen_range(1e4..2e5), rng.gen_range(1e4..2e5));
    let refs = ReferenceWindow {
        points: (0..np)
            .map(|_| ReferencePoint { v_ref: rng.gen_range(5.0..21.0), k: rng.gen_range(-0.04..0.04) })
            .collect(),
    };
    let u_prev = ControlInput::new(
        rng.gen_range(cfg.u_min[0]..cfg.u_max[0]),
        rng.gen_range(cfg.u_min[1]..cfg.u_max[1]),
    );
    let models = horizon_models(&x, &stiff, &refs, None, &cfg, &params).unwrap();
    condense(&models, &x, &refs, &u_prev, &cfg).unwrap().qp
}

pub fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}

pub fn dense(rows: usize, cols: usize, f: impl FnMut(usize, usize) -> f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, f)
}
