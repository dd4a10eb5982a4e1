//! Dense convex QP solver for
//! `min ½ξᵀHξ + gᵀξ + c₀  s.t.  A_eq ξ = b_eq,  A_in ξ ≤ b_in`.
//!
//! Equalities are eliminated with a null-space basis and the reduced problem
//! is solved by the Goldfarb–Idnani dual active-set method. When the reduced
//! Hessian is only semidefinite (LPs included) an outer proximal-point loop
//! adds `ρ/2‖y − yₖ‖²` and re-solves until the iterates stall.
//!
//! [`PreparedQp`] caches every factorization that depends on `(H, A_eq, A_in)`
//! so repeated solves with new `(g, b_eq, b_in)` only pay for the active-set
//! iterations.

use std::path::Path;

use nalgebra::SVD;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::{is_symmetric, min_eigenvalue, symmetrize, Mat, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticProgram {
    pub h: Mat,
    pub g: Vector,
    pub a_eq: Mat,
    pub b_eq: Vector,
    pub a_in: Mat,
    pub b_in: Vector,
    /// Constant added to the objective value.
    pub offset: f64,
}

impl QuadraticProgram {
    pub fn new(h: Mat, g: Vector) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            a_eq: Mat::zeros(0, n),
            b_eq: Vector::zeros(0),
            a_in: Mat::zeros(0, n),
            b_in: Vector::zeros(0),
            offset: 0.0,
        }
    }

    pub fn with_equalities(mut self, a: Mat, b: Vector) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_inequalities(mut self, a: Mat, b: Vector) -> Self {
        self.a_in = a;
        self.b_in = b;
        self
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if self.h.shape() != (n, n) {
            return Err(dim_err("QP Hessian", format!("{n}x{n}"), format!("{:?}", self.h.shape())));
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return Err(dim_err(
                "QP equalities",
                format!("{}x{n}", self.b_eq.len()),
                format!("{:?}", self.a_eq.shape()),
            ));
        }
        if self.a_in.ncols() != n || self.a_in.nrows() != self.b_in.len() {
            return Err(dim_err(
                "QP inequalities",
                format!("{}x{n}", self.b_in.len()),
                format!("{:?}", self.a_in.shape()),
            ));
        }
        Ok(())
    }

    pub fn objective(&self, xi: &Vector) -> f64 {
        0.5 * xi.dot(&(&self.h * xi)) + self.g.dot(xi) + self.offset
    }

    /// Writes the problem as JSON for cross-checking with external solvers.
    pub fn dump(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, crate::io::to_json_string(self)?.as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KktResiduals {
    /// `‖A_eq ξ − b_eq‖∞`.
    pub equality: f64,
    /// `max(0, max(A_in ξ − b_in))`.
    pub inequality: f64,
    /// `‖Hξ + g + A_eqᵀν + A_inᵀλ‖∞`.
    pub stationarity: f64,
    /// `max(0, −min λ)`.
    pub dual: f64,
    /// `max |λᵢ (A_in ξ − b_in)ᵢ|`.
    pub complementarity: f64,
}

/// KKT residuals of a candidate primal-dual point. Independent of the solver.
pub fn kkt_residuals(qp: &QuadraticProgram, xi: &Vector, lambda: &Vector, nu: &Vector) -> KktResiduals {
    let eq = &qp.a_eq * xi - &qp.b_eq;
    let slack = &qp.a_in * xi - &qp.b_in;
    let grad = &qp.h * xi + &qp.g + qp.a_eq.transpose() * nu + qp.a_in.transpose() * lambda;
    KktResiduals {
        equality: eq.amax(),
        inequality: slack.iter().fold(0.0, |m, &s| m.max(s)),
        stationarity: grad.amax(),
        dual: lambda.iter().fold(0.0, |m, &l| m.max(-l)),
        complementarity: lambda
            .iter()
            .zip(slack.iter())
            .fold(0.0, |m, (l, s)| m.max((l * s).abs())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpSettings {
    pub tol_eq: f64,
    pub tol_in: f64,
    pub tol_stat: f64,
    /// Cap on active-set steps per inner solve.
    pub max_iterations: usize,
    /// Proximal weight relative to `max(1, max|Gᵢⱼ|)` for semidefinite problems.
    pub prox_rho: f64,
    pub max_prox_iterations: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol_eq: 1e-8,
            tol_in: 1e-8,
            tol_stat: 1e-6,
            max_iterations: 10_000,
            prox_rho: 1e-4,
            max_prox_iterations: 2_000,
        }
    }
}

impl QpSettings {
    pub fn within(&self, r: &KktResiduals) -> bool {
        r.equality <= self.tol_eq
            && r.inequality <= self.tol_in
            && r.stationarity <= self.tol_stat
            && r.dual <= self.tol_stat
            && r.complementarity <= self.tol_stat
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub xi: Vector,
    pub objective: f64,
    pub status: QpStatus,
    pub residuals: KktResiduals,
    pub iterations: usize,
    /// Inequality multipliers (zero for inactive rows).
    pub lambda: Vector,
    /// Equality multipliers.
    pub nu: Vector,
    /// Inequality rows in the final working set.
    pub active: Vec<usize>,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

/// One-shot solve.
pub fn solve(qp: &QuadraticProgram, settings: &QpSettings, warm: Option<&Vector>) -> Result<QpSolution> {
    qp.validate()?;
    PreparedQp::new(&qp.h, &qp.a_eq, &qp.a_in, *settings)?.solve_with_offset(
        &qp.g,
        &qp.b_eq,
        &qp.b_in,
        qp.offset,
        warm,
    )
}

/// `min cᵀξ` over `A_in ξ ≤ b_in`, `A_eq ξ = b_eq`.
pub fn solve_lp(c: &Vector, a_in: &Mat, b_in: &Vector, a_eq: &Mat, b_eq: &Vector) -> Result<QpSolution> {
    let n = c.len();
    let qp = QuadraticProgram::new(Mat::zeros(n, n), c.clone())
        .with_equalities(a_eq.clone(), b_eq.clone())
        .with_inequalities(a_in.clone(), b_in.clone());
    solve(&qp, &QpSettings::default(), None)
}

/// Factorizations for a fixed `(H, A_eq, A_in)`.
#[derive(Debug, Clone)]
pub struct PreparedQp {
    h: Mat,
    a_eq: Mat,
    a_in: Mat,
    settings: QpSettings,
    /// Orthonormal null-space basis of `A_eq`.
    z: Mat,
    /// Pseudo-inverse of `A_eq`.
    pinv: Mat,
    /// `A_in Z`.
    c: Mat,
    /// `L⁻ᵀ` for the (possibly regularized) reduced Hessian `ZᵀHZ + ρI = LLᵀ`.
    j0: Mat,
    /// Reduced Hessian `ZᵀHZ`.
    g_red: Mat,
    /// Inequality rows that vanish on the equality null space; their slack
    /// is fixed by the equalities.
    null_rows: Vec<bool>,
    /// Proximal weight, zero when `ZᵀHZ` is positive definite.
    rho: f64,
}

impl PreparedQp {
    pub fn new(h: &Mat, a_eq: &Mat, a_in: &Mat, settings: QpSettings) -> Result<Self> {
        let n = h.nrows();
        if h.ncols() != n || a_eq.ncols() != n || a_in.ncols() != n {
            return Err(dim_err("QP matrices", format!("{n} columns"), "mismatch"));
        }
        let scale = h.amax().max(1.0);
        if !is_symmetric(h, 1e-10 * scale) {
            return Err(Error::Invalid("QP Hessian is not symmetric".into()));
        }
        let h = symmetrize(h);
        if n > 0 {
            let lam = min_eigenvalue(&h);
            if lam < -1e-10 * scale {
                return Err(Error::NotPsd { min_eigenvalue: lam });
            }
        }
        let (z, pinv) = null_space(a_eq);
        let c = a_in * &z;
        let null_rows = (0..c.nrows())
            .map(|i| c.row(i).amax() <= 1e-10 * a_in.row(i).amax().max(1.0))
            .collect();
        let g = symmetrize(&(z.transpose() * &h * &z));
        let k = g.nrows();
        let g_scale = g.amax().max(1.0);
        let definite = k == 0 || min_eigenvalue(&g) > 1e-9 * g_scale;
        let rho = if definite { 0.0 } else { settings.prox_rho * g_scale };
        let mut reg = g.clone();
        for i in 0..k {
            reg[(i, i)] += rho;
        }
        let j0 = if k == 0 {
            Mat::zeros(0, 0)
        } else {
            let l = reg
                .cholesky()
                .ok_or(Error::NotPsd {
                    min_eigenvalue: f64::NAN,
                })?
                .l();
            l.transpose()
                .try_inverse()
                .ok_or_else(|| Error::Qp("reduced Hessian factor is singular".into()))?
        };
        Ok(Self {
            h,
            a_eq: a_eq.clone(),
            a_in: a_in.clone(),
            settings,
            z,
            pinv,
            c,
            j0,
            g_red: g,
            null_rows,
            rho,
        })
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn settings(&self) -> &QpSettings {
        &self.settings
    }

    pub fn solve(&self, g: &Vector, b_eq: &Vector, b_in: &Vector, warm: Option<&Vector>) -> Result<QpSolution> {
        self.solve_with_offset(g, b_eq, b_in, 0.0, warm)
    }

    pub fn solve_with_offset(
        &self,
        g: &Vector,
        b_eq: &Vector,
        b_in: &Vector,
        offset: f64,
        warm: Option<&Vector>,
    ) -> Result<QpSolution> {
        let n = self.dim();
        if g.len() != n || b_eq.len() != self.a_eq.nrows() || b_in.len() != self.a_in.nrows() {
            return Err(dim_err("QP vectors", "matching prepared matrices", "mismatch"));
        }
        let s = &self.settings;
        let m = b_in.len();
        let xi_p = &self.pinv * b_eq;
        let eq_res = (&self.a_eq * &xi_p - b_eq).amax();
        let empty = |status, iterations| QpSolution {
            xi: xi_p.clone(),
            objective: f64::NAN,
            status,
            residuals: KktResiduals::default(),
            iterations,
            lambda: Vector::zeros(m),
            nu: Vector::zeros(b_eq.len()),
            active: Vec::new(),
        };
        if eq_res > s.tol_eq * (1.0 + b_eq.amax()) {
            return Ok(empty(QpStatus::Infeasible, 0));
        }
        let lin = self.z.transpose() * (&self.h * &xi_p + g);
        let d = b_in - &self.a_in * &xi_p;
        let hint: Vec<usize> = warm
            .map(|w| {
                let slack = &self.a_in * w - b_in;
                (0..m).filter(|&i| slack[i] >= -1e-9).collect()
            })
            .unwrap_or_default();
        let feas_tol = 0.01 * s.tol_in;
        if (0..m).any(|i| self.null_rows[i] && d[i] < -feas_tol) {
            return Ok(empty(QpStatus::Infeasible, 0));
        }

        let (y, lambda, active, iterations, status) = if self.z.ncols() == 0 {
            let status = if d.iter().all(|&di| di >= -feas_tol) {
                QpStatus::Optimal
            } else {
                QpStatus::Infeasible
            };
            (Vector::zeros(0), Vector::zeros(m), Vec::new(), 0, status)
        } else if self.rho == 0.0 {
            let out = dual_active_set(&self.j0, &self.c, &lin, &d, &self.null_rows, &hint, s.max_iterations, feas_tol);
            (out.y, out.lambda, out.active, out.iterations, out.status)
        } else {
            self.proximal(&lin, &d, hint, feas_tol)
        };
        if status == QpStatus::Infeasible {
            return Ok(empty(status, iterations));
        }
        let (y, lambda) = if status == QpStatus::Optimal {
            self.polish(y, lambda, &active, &lin, &d, feas_tol)
        } else {
            (y, lambda)
        };
        let xi = &xi_p + &self.z * &y;
        let r = &self.h * &xi + g + self.a_in.transpose() * &lambda;
        let nu = -(self.pinv.transpose() * r);
        let qp_view = QuadraticProgram {
            h: self.h.clone(),
            g: g.clone(),
            a_eq: self.a_eq.clone(),
            b_eq: b_eq.clone(),
            a_in: self.a_in.clone(),
            b_in: b_in.clone(),
            offset,
        };
        let residuals = kkt_residuals(&qp_view, &xi, &lambda, &nu);
        let status = if status == QpStatus::Optimal && !s.within(&residuals) {
            log::warn!("QP solution misses KKT tolerances: {residuals:?}");
            QpStatus::MaxIterations
        } else {
            status
        };
        Ok(QpSolution {
            objective: qp_view.objective(&xi),
            xi,
            status,
            residuals,
            iterations,
            lambda,
            nu,
            active,
        })
    }

    /// Iterative refinement on the KKT system of the final working set. The
    /// explicit `L⁻ᵀ` loses digits on ill-conditioned Hessians; the refined
    /// point is kept only if it is feasible, dual feasible and closer to
    /// stationarity.
    fn polish(
        &self,
        y: Vector,
        lambda: Vector,
        active: &[usize],
        lin: &Vector,
        d: &Vector,
        feas_tol: f64,
    ) -> (Vector, Vector) {
        let (k, q) = (y.len(), active.len());
        if k == 0 {
            return (y, lambda);
        }
        let mut kkt = Mat::zeros(k + q, k + q);
        kkt.view_mut((0, 0), (k, k)).copy_from(&self.g_red);
        for (a, &i) in active.iter().enumerate() {
            for c in 0..k {
                kkt[(k + a, c)] = self.c[(i, c)];
                kkt[(c, k + a)] = self.c[(i, c)];
            }
        }
        let lu = kkt.lu();
        let residual = |y: &Vector, u: &Vector| {
            let mut r = Vector::zeros(k + q);
            let mut grad = &self.g_red * y + lin;
            for (a, &i) in active.iter().enumerate() {
                grad += self.c.row(i).transpose() * u[a];
                r[k + a] = d[i] - self.c.row(i).transpose().dot(y);
            }
            r.rows_mut(0, k).copy_from(&(-grad));
            r
        };
        let mut cur_y = y.clone();
        let mut cur_u = Vector::from_iterator(q, active.iter().map(|&i| lambda[i]));
        let start = residual(&cur_y, &cur_u).amax();
        for _ in 0..3 {
            let Some(step) = lu.solve(&residual(&cur_y, &cur_u)) else {
                return (y, lambda);
            };
            cur_y += step.rows(0, k);
            cur_u += step.rows(k, q);
        }
        let feasible = (0..d.len()).all(|i| self.c.row(i).transpose().dot(&cur_y) - d[i] <= feas_tol);
        if !(residual(&cur_y, &cur_u).amax() < start && feasible && cur_u.iter().all(|&u| u >= -feas_tol)) {
            return (y, lambda);
        }
        let mut out = Vector::zeros(lambda.len());
        for (a, &i) in active.iter().enumerate() {
            out[i] = cur_u[a].max(0.0);
        }
        (cur_y, out)
    }

    fn proximal(
        &self,
        lin: &Vector,
        d: &Vector,
        mut hint: Vec<usize>,
        feas_tol: f64,
    ) -> (Vector, Vector, Vec<usize>, usize, QpStatus) {
        let s = &self.settings;
        let mut y = Vector::zeros(self.z.ncols());
        let mut total = 0;
        for _ in 0..s.max_prox_iterations {
            let shifted = lin - &y * self.rho;
            let out = dual_active_set(&self.j0, &self.c, &shifted, d, &self.null_rows, &hint, s.max_iterations, feas_tol);
            total += out.iterations;
            if out.status != QpStatus::Optimal {
                return (out.y, out.lambda, out.active, total, out.status);
            }
            let step = (&out.y - &y).amax();
            let done = step <= 1e-11 * (1.0 + out.y.amax());
            y = out.y;
            hint = out.active.clone();
            if done {
                return (y, out.lambda, out.active, total, QpStatus::Optimal);
            }
        }
        (y, Vector::zeros(d.len()), hint, total, QpStatus::MaxIterations)
    }
}

/// Orthonormal null-space basis and pseudo-inverse of `a` (rows may be
/// redundant).
fn null_space(a: &Mat) -> (Mat, Mat) {
    let (m, n) = a.shape();
    if m == 0 {
        return (Mat::identity(n, n), Mat::zeros(n, 0));
    }
    // Pad to at least n rows so the SVD returns a full right basis.
    let rows = m.max(n);
    let mut padded = Mat::zeros(rows, n);
    padded.view_mut((0, 0), (m, n)).copy_from(a);
    let svd = SVD::new(padded, false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let sv = &svd.singular_values;
    let tol = sv.max() * 1e-12 * n.max(m) as f64;
    let kept: Vec<usize> = (0..sv.len()).filter(|&i| sv[i] > tol).collect();
    let null: Vec<usize> = (0..n).filter(|i| !kept.contains(i)).collect();
    let z = Mat::from_fn(n, null.len(), |r, c| v_t[(null[c], r)]);
    // pinv = Y (AY)⁺ with Y spanning the row space. The SVD's left vectors
    // lose orthogonality on long horizon chains, so they are not used.
    let y = Mat::from_fn(n, kept.len(), |r, c| v_t[(kept[c], r)]);
    let pinv = if kept.is_empty() {
        Mat::zeros(n, m)
    } else {
        let qr = (a * &y).qr();
        let r_inv_qt = qr
            .r()
            .solve_upper_triangular(&qr.q().transpose())
            .expect("row-space image has full column rank");
        y * r_inv_qt
    };
    (z, pinv)
}

struct DualOutcome {
    y: Vector,
    lambda: Vector,
    active: Vec<usize>,
    iterations: usize,
    status: QpStatus,
}

/// Goldfarb–Idnani for `min ½yᵀGy + cᵀy  s.t.  Cy ≤ d`, given `J₀ = L⁻ᵀ`
/// with `G = LLᵀ`. Constraints listed in `hint` are added first when
/// violated; rows flagged in `skip` are never considered.
#[allow(clippy::too_many_arguments)]
fn dual_active_set(
    j0: &Mat,
    cmat: &Mat,
    lin: &Vector,
    d: &Vector,
    skip: &[bool],
    hint: &[usize],
    max_iterations: usize,
    feas_tol: f64,
) -> DualOutcome {
    let n = j0.nrows();
    let m = cmat.nrows();
    let mut j = j0.clone();
    let mut r = Mat::zeros(n, n);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut in_set = vec![false; m];
    let mut y = -(j0 * (j0.transpose() * lin));
    let mut iterations = 0;

    // Violation of row i; positive means violated.
    let violation = |y: &Vector, i: usize| cmat.row(i).transpose().dot(y) - d[i];
    let finish = |y: Vector, active: Vec<usize>, u: &[f64], iterations, status| {
        let mut lambda = Vector::zeros(m);
        for (k, &i) in active.iter().enumerate() {
            lambda[i] = u[k];
        }
        DualOutcome {
            y,
            lambda,
            active,
            iterations,
            status,
        }
    };

    loop {
        let pick = |set: &mut dyn Iterator<Item = usize>, y: &Vector| {
            let mut best: Option<(usize, f64)> = None;
            for i in set {
                if in_set[i] || skip[i] {
                    continue;
                }
                let v = violation(y, i);
                if v > feas_tol && best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            best.map(|(i, _)| i)
        };
        let p = pick(&mut hint.iter().copied(), &y).or_else(|| pick(&mut (0..m), &y));
        let Some(p) = p else {
            return finish(y, active, &u, iterations, QpStatus::Optimal);
        };
        // Normal of p in the `nᵀy ≥ b` convention.
        let np = -cmat.row(p).transpose();
        let mut u_p = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iterations {
                return finish(y, active, &u, iterations, QpStatus::MaxIterations);
            }
            let q = active.len();
            let dv = j.transpose() * &np;
            let d2 = dv.rows(q, n - q);
            let z = j.columns(q, n - q) * d2;
            let rv = if q == 0 {
                Vector::zeros(0)
            } else {
                r.view((0, 0), (q, q))
                    .solve_upper_triangular(&dv.rows(0, q))
                    .expect("active-set factor has a nonzero diagonal")
            };
            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for k in 0..q {
                if rv[k] > 0.0 {
                    let ratio = u[k] / rv[k];
                    if ratio < t1 {
                        t1 = ratio;
                        drop_at = Some(k);
                    }
                }
            }
            let degenerate = d2.norm() <= 1e-11 * dv.norm().max(f64::MIN_POSITIVE);
            let s_p = -violation(&y, p);
            let t2 = if degenerate {
                f64::INFINITY
            } else {
                -s_p / z.dot(&np)
            };
            let t = t1.min(t2);
            if t == f64::INFINITY {
                return finish(y, active, &u, iterations, QpStatus::Infeasible);
            }
            for k in 0..q {
                u[k] -= t * rv[k];
            }
            u_p += t;
            if t2 == f64::INFINITY {
                let k = drop_at.expect("finite partial step has a blocking constraint");
                in_set[active[k]] = false;
                drop_constraint(&mut j, &mut r, &mut active, &mut u, k);
                continue;
            }
            y += &z * t;
            if t2 <= t1 {
                add_constraint(&mut j, &mut r, dv, q);
                active.push(p);
                u.push(u_p);
                in_set[p] = true;
                break;
            }
            let k = drop_at.expect("partial step has a blocking constraint");
            in_set[active[k]] = false;
            drop_constraint(&mut j, &mut r, &mut active, &mut u, k);
        }
    }
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let h = a.hypot(b);
    if h == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / h, b / h, h)
    }
}

/// Rotates `J` so that `Jᵀn` has zeros below position `q`, then appends the
/// new column to `R`.
fn add_constraint(j: &mut Mat, r: &mut Mat, mut dv: Vector, q: usize) {
    let n = j.nrows();
    for k in (q + 1..n).rev() {
        let (c, s, h) = givens(dv[k - 1], dv[k]);
        if s == 0.0 {
            continue;
        }
        dv[k - 1] = h;
        dv[k] = 0.0;
        rotate_columns(j, k - 1, c, s);
    }
    for i in 0..=q {
        r[(i, q)] = dv[i];
    }
}

/// `col a ← c·a + s·b`, `col b ← −s·a + c·b` for `b = a + 1`.
fn rotate_columns(j: &mut Mat, a: usize, c: f64, s: f64) {
    for row in 0..j.nrows() {
        let (x, y) = (j[(row, a)], j[(row, a + 1)]);
        j[(row, a)] = c * x + s * y;
        j[(row, a + 1)] = -s * x + c * y;
    }
}

fn drop_constraint(j: &mut Mat, r: &mut Mat, active: &mut Vec<usize>, u: &mut Vec<f64>, k: usize) {
    let q = active.len();
    active.remove(k);
    u.remove(k);
    for col in k..q - 1 {
        for row in 0..q {
            r[(row, col)] = r[(row, col + 1)];
        }
    }
    for row in 0..q {
        r[(row, q - 1)] = 0.0;
    }
    for col in k..q - 1 {
        let (c, s, _) = givens(r[(col, col)], r[(col + 1, col)]);
        for cc in col..q - 1 {
            let (x, y) = (r[(col, cc)], r[(col + 1, cc)]);
            r[(col, cc)] = c * x + s * y;
            r[(col + 1, cc)] = -s * x + c * y;
        }
        r[(col + 1, col)] = 0.0;
        rotate_columns(j, col, c, s);
    }
    for cc in 0..q {
        r[(q - 1, cc)] = 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{mat, vector};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn check_optimal(qp: &QuadraticProgram, sol: &QpSolution) {
        assert_eq!(sol.status, QpStatus::Optimal, "{sol:?}");
        let r = kkt_residuals(qp, &sol.xi, &sol.lambda, &sol.nu);
        assert!(QpSettings::default().within(&r), "{r:?}");
    }

    #[test]
    fn single_active_bound() {
        let qp = QuadraticProgram::new(mat(&[&[2.0]]), vector(&[0.0]))
            .with_inequalities(mat(&[&[-1.0]]), vector(&[-1.0]));
        let sol = solve(&qp, &QpSettings::default(), None).unwrap();
        check_optimal(&qp, &sol);
        assert_relative_eq!(sol.xi[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(sol.objective, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn equality_projection() {
        let qp = QuadraticProgram::new(Mat::identity(2, 2), vector(&[0.0, 0.0]))
            .with_equalities(mat(&[&[1.0, 1.0]]), vector(&[1.0]));
        let sol = solve(&qp, &QpSettings::default(), None).unwrap();
        check_optimal(&qp, &sol);
        assert_relative_eq!(sol.xi, vector(&[0.5, 0.5]), epsilon = 1e-12);
        assert_relative_eq!(sol.nu[0], -0.5, epsilon = 1e-12);
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        let qp = QuadraticProgram::new(mat(&[&[2.0]]), vector(&[0.0]))
            .with_inequalities(mat(&[&[1.0], &[-1.0]]), vector(&[-1.0, -1.0]));
        let sol = solve(&qp, &QpSettings::default(), None).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn inconsistent_equalities_are_infeasible() {
        let qp = QuadraticProgram::new(Mat::identity(2, 2), vector(&[0.0, 0.0])).with_equalities(
            mat(&[&[1.0, 1.0], &[2.0, 2.0]]),
            vector(&[1.0, 3.0]),
        );
        assert_eq!(solve(&qp, &QpSettings::default(), None).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn inequality_fixed_by_equalities() {
        let a = vec![0.3, -0.7, 0.5];
        let base = QuadraticProgram::new(Mat::identity(3, 3), vector(&[0.1, 0.2, 0.3]))
            .with_equalities(Mat::from_row_slice(1, 3, &a), vector(&[0.2]));
        let bad = base.clone().with_inequalities(Mat::from_row_slice(1, 3, &a), vector(&[-0.8]));
        assert_eq!(solve(&bad, &QpSettings::default(), None).unwrap().status, QpStatus::Infeasible);
        let ok = base.with_inequalities(Mat::from_row_slice(1, 3, &a), vector(&[1.2]));
        check_optimal(&ok, &solve(&ok, &QpSettings::default(), None).unwrap());
    }

    #[test]
    fn redundant_equalities_are_fine() {
        let qp = QuadraticProgram::new(Mat::identity(2, 2), vector(&[0.0, 0.0])).with_equalities(
            mat(&[&[1.0, 1.0], &[2.0, 2.0]]),
            vector(&[1.0, 2.0]),
        );
        let sol = solve(&qp, &QpSettings::default(), None).unwrap();
        check_optimal(&qp, &sol);
        assert_relative_eq!(sol.xi, vector(&[0.5, 0.5]), epsilon = 1e-12);
    }

    #[test]
    fn indefinite_hessian_is_rejected() {
        let qp = QuadraticProgram::new(mat(&[&[1.0, 0.0], &[0.0, -1.0]]), vector(&[0.0, 0.0]));
        assert!(matches!(solve(&qp, &QpSettings::default(), None), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn small_lp() {
        // max x + y over the unit simplex-like region x + 2y ≤ 2, 2x + y ≤ 2, x, y ≥ 0.
        let sol = solve_lp(
            &vector(&[-1.0, -1.0]),
            &mat(&[&[1.0, 2.0], &[2.0, 1.0], &[-1.0, 0.0], &[0.0, -1.0]]),
            &vector(&[2.0, 2.0, 0.0, 0.0]),
            &Mat::zeros(0, 2),
            &Vector::zeros(0),
        )
        .unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.xi, vector(&[2.0 / 3.0, 2.0 / 3.0]), epsilon = 1e-7);
    }

    #[test]
    fn semidefinite_qp() {
        // min (x − 1)² with y free in [−1, 1] and linear pull on y.
        let qp = QuadraticProgram::new(mat(&[&[2.0, 0.0], &[0.0, 0.0]]), vector(&[-2.0, 1.0]))
            .with_inequalities(mat(&[&[0.0, 1.0], &[0.0, -1.0]]), vector(&[1.0, 1.0]));
        let sol = solve(&qp, &QpSettings::default(), None).unwrap();
        check_optimal(&qp, &sol);
        assert_relative_eq!(sol.xi, vector(&[1.0, -1.0]), epsilon = 1e-8);
    }

    #[test]
    fn fully_determined_by_equalities() {
        let qp = QuadraticProgram::new(Mat::identity(2, 2), vector(&[1.0, 0.0]))
            .with_equalities(Mat::identity(2, 2), vector(&[1.0, 2.0]))
            .with_inequalities(mat(&[&[1.0, 0.0]]), vector(&[3.0]));
        let sol = solve(&qp, &QpSettings::default(), None).unwrap();
        check_optimal(&qp, &sol);
        assert_relative_eq!(sol.xi, vector(&[1.0, 2.0]), epsilon = 1e-12);
        let qp = qp.with_inequalities(mat(&[&[1.0, 0.0]]), vector(&[0.5]));
        assert_eq!(solve(&qp, &QpSettings::default(), None).unwrap().status, QpStatus::Infeasible);
    }

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, m_eq: usize, m_in: usize, psd: bool) -> (QuadraticProgram, Vector) {
        let f = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let mut h = &f * f.transpose();
        if psd {
            let keep = n / 2;
            let f = f.columns(0, keep).into_owned();
            h = &f * f.transpose();
        } else {
            for i in 0..n {
                h[(i, i)] += 0.1;
            }
        }
        let g = Vector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
        let feasible = Vector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let a_eq = Mat::from_fn(m_eq, n, |_, _| rng.gen_range(-1.0..1.0));
        let b_eq = &a_eq * &feasible;
        // Box rows keep semidefinite problems bounded.
        let a_in = Mat::from_fn(m_in, n, |_, _| rng.gen_range(-1.0..1.0));
        let mut a_full = Mat::zeros(m_in + 2 * n, n);
        a_full.view_mut((0, 0), (m_in, n)).copy_from(&a_in);
        for i in 0..n {
            a_full[(m_in + 2 * i, i)] = 1.0;
            a_full[(m_in + 2 * i + 1, i)] = -1.0;
        }
        let slack = Vector::from_fn(m_in + 2 * n, |_, _| rng.gen_range(0.0..0.5));
        let b_in = &a_full * &feasible + slack;
        let qp = QuadraticProgram::new(h, g)
            .with_equalities(a_eq, b_eq)
            .with_inequalities(a_full, b_in);
        (qp, feasible)
    }

    fn sample_feasible(qp: &QuadraticProgram, base: &Vector, rng: &mut ChaCha8Rng) -> Option<Vector> {
        // Random direction in the equality null space, shrunk until feasible.
        let (z, _) = null_space(&qp.a_eq);
        if z.ncols() == 0 {
            return None;
        }
        let dir = &z * Vector::from_fn(z.ncols(), |_, _| rng.gen_range(-1.0..1.0));
        let mut step = 1.0;
        for _ in 0..30 {
            let cand = base + &dir * step;
            if (&qp.a_in * &cand - &qp.b_in).max() <= 0.0 {
                return Some(cand);
            }
            step *= 0.5;
        }
        None
    }

    #[test]
    fn random_problems_satisfy_kkt_and_beat_feasible_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let settings = QpSettings::default();
        for trial in 0..500 {
            let n = rng.gen_range(2..12);
            let m_eq = rng.gen_range(0..n.min(4));
            let m_in = rng.gen_range(0..20);
            let psd = trial % 5 == 0;
            let (qp, feasible) = random_problem(&mut rng, n, m_eq, m_in, psd);
            let sol = solve(&qp, &settings, None).unwrap();
            check_optimal(&qp, &sol);
            let mut points = vec![feasible.clone()];
            for _ in 0..5 {
                points.extend(sample_feasible(&qp, &feasible, &mut rng));
            }
            for p in points {
                assert!(sol.objective <= qp.objective(&p) + 1e-6, "trial {trial}");
            }
        }
    }

    #[test]
    fn warm_start_gives_the_same_answer() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let (qp, _) = random_problem(&mut rng, 8, 2, 12, false);
            let cold = solve(&qp, &QpSettings::default(), None).unwrap();
            let warm = solve(&qp, &QpSettings::default(), Some(&cold.xi)).unwrap();
            check_optimal(&qp, &warm);
            assert_relative_eq!(cold.xi, warm.xi, epsilon = 1e-8);
        }
    }

    #[test]
    fn solves_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (qp, _) = random_problem(&mut rng, 10, 3, 15, false);
        let a = solve(&qp, &QpSettings::default(), None).unwrap();
        let b = solve(&qp, &QpSettings::default(), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dump_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qp.json");
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (qp, _) = random_problem(&mut rng, 4, 1, 3, false);
        qp.dump(&path).unwrap();
        let back: QuadraticProgram = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back, qp);
    }
}
