//! Dense convex QP solver.
//!
//! Solves `min 1/2 z'Hz + f'z  s.t.  G z <= h` with the Goldfarb-Idnani dual
//! active-set method. Each iteration recomputes the projected step from
//! `H^-1` and the active normals; the problems coming out of the condensed
//! MPC have a few dozen variables, so dense recomputation is cheap and keeps
//! the method easy to audit.
//!
//! A Hessian that is singular (or close to it) is handled by proximal-point
//! outer iterations: each subproblem adds `rho/2 |z - z_k|^2`, which is
//! strictly convex, and the sequence converges to a minimizer of the original
//! problem.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub g: DMatrix<f64>,
    pub hvec: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxIter,
    InfeasibleRelaxed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    /// Multipliers of `G z <= h`, nonnegative, zero for inactive rows.
    pub lambda: DVector<f64>,
    pub iterations: usize,
    pub status: QpStatus,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResidual {
    pub primal: f64,
    pub stationarity: f64,
    pub complementarity: f64,
    pub dual: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.primal.max(self.stationarity).max(self.complementarity).max(self.dual)
    }
}

impl QpProblem {
    pub fn new(h: DMatrix<f64>, f: DVector<f64>, g: DMatrix<f64>, hvec: DVector<f64>) -> Result<Self> {
        let n = f.len();
        if h.nrows() != n || h.ncols() != n {
            return Err(Error::DimensionMismatch(format!("H is {}x{}, f has {n}", h.nrows(), h.ncols())));
        }
        if g.ncols() != n || g.nrows() != hvec.len() {
            return Err(Error::DimensionMismatch(format!(
                "G is {}x{}, h has {}, n = {n}",
                g.nrows(),
                g.ncols(),
                hvec.len()
            )));
        }
        Ok(Self { h, f, g, hvec })
    }

    /// Unconstrained problem.
    pub fn unconstrained(h: DMatrix<f64>, f: DVector<f64>) -> Result<Self> {
        let n = f.len();
        Self::new(h, f, DMatrix::zeros(0, n), DVector::zeros(0))
    }

    /// `lo <= z <= hi` as `2n` inequality rows.
    pub fn with_box(h: DMatrix<f64>, f: DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> Result<Self> {
        let n = f.len();
        if lo.len() != n || hi.len() != n {
            return Err(Error::DimensionMismatch("box bounds".into()));
        }
        if lo.iter().zip(hi.iter()).any(|(l, u)| l > u) {
            return Err(Error::InfeasibleBounds("lower bound above upper bound".into()));
        }
        let mut g = DMatrix::zeros(2 * n, n);
        let mut hv = DVector::zeros(2 * n);
        for i in 0..n {
            g[(2 * i, i)] = 1.0;
            hv[2 * i] = hi[i];
            g[(2 * i + 1, i)] = -1.0;
            hv[2 * i + 1] = -lo[i];
        }
        Self::new(h, f, g, hv)
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.hvec.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.f.dot(z)
    }

    pub fn kkt_residual(&self, z: &DVector<f64>, lambda: &DVector<f64>) -> KktResidual {
        let slack = &self.hvec - &self.g * z;
        let primal = slack.iter().fold(0.0f64, |acc, s| acc.max(-s));
        let grad = &self.h * z + &self.f + self.g.transpose() * lambda;
        let stationarity = grad.amax();
        let complementarity = slack
            .iter()
            .zip(lambda.iter())
            .fold(0.0f64, |acc, (s, l)| acc.max((s.max(0.0) * l).abs()));
        let dual = lambda.iter().fold(0.0f64, |acc, l| acc.max(-l));
        KktResidual { primal, stationarity, complementarity, dual }
    }
}

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 4000;

/// Solves `qp`. `tol` bounds the primal violation accepted at exit and
/// `max_iter` the total number of active-set changes.
pub fn solve_qp(qp: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution> {
    let n = qp.dim();
    if n == 0 {
        return Ok(QpSolution {
            z: DVector::zeros(0),
            lambda: DVector::zeros(qp.n_constraints()),
            iterations: 0,
            status: QpStatus::Optimal,
        });
    }
    match well_conditioned_inverse(&qp.h) {
        Some(hinv) => dual_active_set(qp, &hinv, &qp.f, tol, max_iter),
        None => proximal_point(qp, tol, max_iter),
    }
}

fn well_conditioned_inverse(h: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = Cholesky::new(h.clone())?;
    let l = chol.l_dirty();
    let diag = l.diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d.abs()), hi.max(d.abs())));
    if !(lo > 0.0) || (lo / hi).powi(2) < 1e-13 {
        return None;
    }
    Some(chol.inverse())
}

fn proximal_point(qp: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution> {
    let n = qp.dim();
    let scale = qp.h.diagonal().amax().max(1.0);
    let rho = 1e-6 * scale;
    let reg = &qp.h + DMatrix::identity(n, n) * rho;
    let hinv = Cholesky::new(reg)
        .ok_or_else(|| Error::DimensionMismatch("Hessian is not positive semidefinite".into()))?
        .inverse();
    let mut z = DVector::zeros(n);
    let mut total = 0usize;
    let mut last = None;
    for _ in 0..500 {
        let f = &qp.f - &z * rho;
        let sol = dual_active_set(qp, &hinv, &f, tol, max_iter.saturating_sub(total).max(1))?;
        total += sol.iterations;
        let step = (&sol.z - &z).amax();
        z.copy_from(&sol.z);
        let status = sol.status;
        last = Some(sol);
        if status != QpStatus::Optimal || step <= 1e-13 * (1.0 + z.amax()) || total >= max_iter {
            break;
        }
    }
    let mut sol = last.expect("at least one proximal iteration");
    sol.iterations = total;
    if total >= max_iter && sol.status == QpStatus::Optimal {
        sol.status = QpStatus::MaxIter;
    }
    Ok(sol)
}

/// Goldfarb-Idnani with `hinv = H^-1` given and linear term `f`.
fn dual_active_set(
    qp: &QpProblem,
    hinv: &DMatrix<f64>,
    f: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<QpSolution> {
    let m = qp.n_constraints();
    let feas_tol = tol.min(1e-9);
    let row_norms: Vec<f64> = (0..m).map(|i| qp.g.row(i).norm()).collect();

    let mut x = -(hinv * f);
    let mut active: Vec<usize> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    let mut iterations = 0usize;

    loop {
        // most violated inactive constraint, scaled by its row norm
        let mut best: Option<(usize, f64)> = None;
        for i in 0..m {
            if row_norms[i] == 0.0 || active.contains(&i) {
                continue;
            }
            let viol = qp.g.row(i).dot(&x.transpose()) - qp.hvec[i];
            if viol > feas_tol * (1.0 + qp.hvec[i].abs()) {
                let scaled = viol / row_norms[i];
                if best.map_or(true, |(_, b)| scaled > b) {
                    best = Some((i, scaled));
                }
            }
        }
        let Some((p, _)) = best else {
            return Ok(finish(x, &active, &mult, m, iterations, QpStatus::Optimal));
        };

        // normal in ">=" form: n_p' x >= b_p with n_p = -g_p, b_p = -h_p
        let np: DVector<f64> = -qp.g.row(p).transpose();
        let mut mult_p = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                log::debug!("QP reached max_iter = {max_iter}");
                return Ok(finish(x, &active, &mult, m, max_iter, QpStatus::MaxIter));
            }
            let (z, r) = step_directions(qp, hinv, &active, &np)?;
            let slack_p = np.dot(&x) + qp.hvec[p];

            // partial step: largest dual step keeping active multipliers >= 0
            let mut t1 = f64::INFINITY;
            let mut drop_k = None;
            for (j, &rj) in r.iter().enumerate() {
                if rj > 0.0 {
                    let t = mult[j] / rj;
                    if t < t1 {
                        t1 = t;
                        drop_k = Some(j);
                    }
                }
            }
            let curvature = hinv_quad(hinv, &np);
            let znp = z.dot(&np);
            let t2 = if znp > 1e-12 * curvature.max(f64::MIN_POSITIVE) { -slack_p / znp } else { f64::INFINITY };

            if t1.is_infinite() && t2.is_infinite() {
                return Err(Error::Infeasible);
            }
            if t2.is_infinite() {
                for (mj, rj) in mult.iter_mut().zip(r.iter()) {
                    *mj -= t1 * rj;
                }
                mult_p += t1;
                let k = drop_k.expect("finite t1 has an index");
                active.remove(k);
                mult.remove(k);
                continue;
            }

            let t = t1.min(t2);
            x += &z * t;
            for (mj, rj) in mult.iter_mut().zip(r.iter()) {
                *mj -= t * rj;
            }
            mult_p += t;
            if t2 <= t1 {
                active.push(p);
                mult.push(mult_p);
                break;
            }
            let k = drop_k.expect("partial step has an index");
            active.remove(k);
            mult.remove(k);
        }
    }
}

fn hinv_quad(hinv: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(hinv * v))
}

/// Primal direction `z` and dual direction `r` for adding normal `np`.
fn step_directions(
    qp: &QpProblem,
    hinv: &DMatrix<f64>,
    active: &[usize],
    np: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let hnp = hinv * np;
    if active.is_empty() {
        return Ok((hnp, DVector::zeros(0)));
    }
    let n = qp.dim();
    let q = active.len();
    let mut normals = DMatrix::zeros(n, q);
    for (c, &i) in active.iter().enumerate() {
        normals.set_column(c, &(-qp.g.row(i).transpose()));
    }
    let w = hinv * &normals;
    let gram = normals.transpose() * &w;
    let rhs = w.transpose() * np;
    let r = match Cholesky::<f64, Dyn>::new(gram.clone()) {
        Some(c) => c.solve(&rhs),
        None => gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::DimensionMismatch("dependent active constraints".into()))?,
    };
    let z = hnp - w * &r;
    Ok((z, r))
}

fn finish(
    x: DVector<f64>,
    active: &[usize],
    mult: &[f64],
    m: usize,
    iterations: usize,
    status: QpStatus,
) -> QpSolution {
    let mut lambda = DVector::zeros(m);
    for (&i, &l) in active.iter().zip(mult) {
        lambda[i] = l.max(0.0);
    }
    QpSolution { z: x, lambda, iterations, status }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_identity() {
        let qp = QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::from_vec(vec![-1.0, -1.0])).unwrap();
        let s = solve_qp(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z[0] - 1.0).abs() < 1e-14 && (s.z[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn box_clipping() {
        let lo = DVector::from_element(2, -0.5);
        let hi = DVector::from_element(2, 0.5);
        let qp = QpProblem::with_box(DMatrix::identity(2, 2), DVector::from_vec(vec![-1.0, -1.0]), &lo, &hi).unwrap();
        let s = solve_qp(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!((s.z[0] - 0.5).abs() < 1e-12 && (s.z[1] - 0.5).abs() < 1e-12);
        assert!(qp.kkt_residual(&s.z, &s.lambda).max() < 1e-12);
        assert!((s.lambda[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn box_clipping_matches_grid_search() {
        // coarse-to-fine grid over the box, independent of the solver
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let f = DVector::from_vec(vec![-3.0, 0.4]);
        let lo = DVector::from_vec(vec![-1.0, -0.2]);
        let hi = DVector::from_vec(vec![0.8, 1.0]);
        let qp = QpProblem::with_box(h, f, &lo, &hi).unwrap();
        let s = solve_qp(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();

        let (mut c0, mut c1, mut w0, mut w1) = (-0.1, 0.4, 0.9, 0.6);
        for _ in 0..40 {
            let mut best = (f64::INFINITY, c0, c1);
            for i in 0..=20 {
                for j in 0..=20 {
                    let a = (c0 - w0 + 2.0 * w0 * i as f64 / 20.0).clamp(lo[0], hi[0]);
                    let b = (c1 - w1 + 2.0 * w1 * j as f64 / 20.0).clamp(lo[1], hi[1]);
                    let v = qp.objective(&DVector::from_vec(vec![a, b]));
                    if v < best.0 {
                        best = (v, a, b);
                    }
                }
            }
            c0 = best.1;
            c1 = best.2;
            w0 *= 0.5;
            w1 *= 0.5;
        }
        assert!((s.z[0] - c0).abs() < 1e-9 && (s.z[1] - c1).abs() < 1e-9, "{} {} vs {c0} {c1}", s.z[0], s.z[1]);
    }

    #[test]
    fn general_inequalities() {
        // min (z0-2)^2 + (z1-2)^2 s.t. z0 + z1 <= 2  -> (1, 1), lambda = 2
        let h = DMatrix::identity(2, 2) * 2.0;
        let f = DVector::from_vec(vec![-4.0, -4.0]);
        let g = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let qp = QpProblem::new(h, f, g, DVector::from_vec(vec![2.0])).unwrap();
        let s = solve_qp(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!((s.z[0] - 1.0).abs() < 1e-12 && (s.z[1] - 1.0).abs() < 1e-12);
        assert!((s.lambda[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn singular_hessian_uses_proximal_iterations() {
        // linear objective in z1: min z0^2 - z1 s.t. z1 <= 3, |z0| <= 1
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let f = DVector::from_vec(vec![-1.0, -1.0]);
        let lo = DVector::from_vec(vec![-1.0, -10.0]);
        let hi = DVector::from_vec(vec![1.0, 3.0]);
        let qp = QpProblem::with_box(h, f, &lo, &hi).unwrap();
        let s = solve_qp(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z[0] - 0.5).abs() < 1e-9, "{}", s.z[0]);
        assert!((s.z[1] - 3.0).abs() < 1e-9, "{}", s.z[1]);
    }

    #[test]
    fn infeasible_detected() {
        let h = DMatrix::identity(1, 1);
        let f = DVector::zeros(1);
        let g = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let qp = QpProblem::new(h, f, g, DVector::from_vec(vec![-1.0, -1.0])).unwrap();
        assert!(matches!(solve_qp(&qp, DEFAULT_TOL, DEFAULT_MAX_ITER), Err(Error::Infeasible)));
    }

    #[test]
    fn inverted_box_rejected() {
        let r = QpProblem::with_box(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            &DVector::from_element(1, 1.0),
            &DVector::from_element(1, 0.0),
        );
        assert!(matches!(r, Err(Error::InfeasibleBounds(_))));
    }

    #[test]
    fn max_iter_reports_status() {
        let lo = DVector::from_element(3, -0.1);
        let hi = DVector::from_element(3, 0.1);
        let qp = QpProblem::with_box(DMatrix::identity(3, 3), DVector::from_element(3, -1.0), &lo, &hi).unwrap();
        let s = solve_qp(&qp, DEFAULT_TOL, 1).unwrap();
        assert_eq!(s.status, QpStatus::MaxIter);
    }
}
