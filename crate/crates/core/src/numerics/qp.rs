//! Dense convex QP `min ½zᵀHz + fᵀz  s.t.  G·z ≤ h`.
//!
//! The solver is an over-relaxed ADMM (operator splitting) iteration on the
//! slack-augmented problem, followed by an active-set polish: once the
//! iterates settle, the constraints carrying positive multipliers are solved
//! as equalities from the KKT system and the active set is corrected until
//! the full KKT conditions hold. `H` and `G` are fixed per solver instance so
//! the factorization is reused across the receding-horizon solves, where only
//! `f` and `h` change.

use std::collections::HashSet;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen, LU};
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub g: DMatrix<f64>,
    pub hvec: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        h: DMatrix<f64>,
        f: DVector<f64>,
        g: DMatrix<f64>,
        hvec: DVector<f64>,
    ) -> Result<Self> {
        let n = h.nrows();
        if h.ncols() != n {
            return Err(Error::Dimension {
                expected: n,
                got: h.ncols(),
            });
        }
        if f.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: f.len(),
            });
        }
        if g.ncols() != n && g.nrows() > 0 {
            return Err(Error::Dimension {
                expected: n,
                got: g.ncols(),
            });
        }
        if g.nrows() != hvec.len() {
            return Err(Error::Dimension {
                expected: g.nrows(),
                got: hvec.len(),
            });
        }
        Ok(Self { h, f, g, hvec })
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn n_constraints(&self) -> usize {
        self.g.nrows()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.f.dot(z)
    }

    /// KKT residuals of a primal/dual pair.
    pub fn kkt(&self, z: &DVector<f64>, y: &DVector<f64>) -> KktResiduals {
        kkt_residuals(&self.h, &self.g, &self.f, &self.hvec, z, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktResiduals {
    /// `‖max(G·z − h, 0)‖∞`
    pub primal: f64,
    /// `‖min(y, 0)‖∞`
    pub dual: f64,
    /// `‖H·z + f + Gᵀ·y‖∞`
    pub stationarity: f64,
    /// `max_i |y_i·(h_i − G_i·z)|`
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal
            .max(self.dual)
            .max(self.stationarity)
            .max(self.complementarity)
    }
}

fn kkt_residuals(
    h: &DMatrix<f64>,
    g: &DMatrix<f64>,
    f: &DVector<f64>,
    hvec: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
) -> KktResiduals {
    let gz = g * z;
    let slack = hvec - &gz;
    let primal = slack.iter().fold(0.0f64, |m, &s| m.max(-s));
    let dual = y.iter().fold(0.0f64, |m, &v| m.max(-v));
    let stationarity = (h * z + f + g.tr_mul(y)).amax();
    let complementarity = y
        .iter()
        .zip(slack.iter())
        .fold(0.0f64, |m, (a, b)| m.max((a * b).abs()));
    KktResiduals {
        primal,
        dual,
        stationarity,
        complementarity,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z_star: DVector<f64>,
    /// Multipliers of `G·z ≤ h`.
    pub y: DVector<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub polished: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    /// KKT tolerance required for `Optimal`.
    pub tol: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation factor in (0, 2).
    pub alpha: f64,
    /// ADMM accuracy at which the active-set polish is first attempted.
    pub polish_trigger: f64,
    /// Residual evaluation cadence.
    pub check_every: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            polish_trigger: 1e-4,
            check_every: 10,
        }
    }
}

/// Solves one QP from a cold start.
pub fn solve_qp(p: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution> {
    let settings = QpSettings {
        tol,
        max_iter,
        ..QpSettings::default()
    };
    let mut solver = QpSolver::new(p.h.clone(), p.g.clone(), settings)?;
    Ok(solver.solve(&p.f, &p.hvec))
}

/// Solver bound to fixed `H` and `G`; keeps the last primal/dual pair as warm start.
///
/// The iteration runs on a Ruiz-equilibrated copy of the problem
/// (`H̃ = c·D·H·D`, `G̃ = E·G·D`); residuals, polishing and results use the
/// original data.
#[derive(Debug, Clone)]
pub struct QpSolver {
    h: DMatrix<f64>,
    g: DMatrix<f64>,
    hs: DMatrix<f64>,
    gs: DMatrix<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
    settings: QpSettings,
    rho: f64,
    chol: Cholesky<f64, Dyn>,
    /// Present when `H` is positive definite; enables the dual active-set path.
    h_chol: Option<Cholesky<f64, Dyn>>,
    warm: Option<(DVector<f64>, DVector<f64>)>,
}

fn check_psd(h: &DMatrix<f64>) -> Result<()> {
    let n = h.nrows();
    if h.ncols() != n {
        return Err(Error::Dimension {
            expected: n,
            got: h.ncols(),
        });
    }
    if n == 0 {
        return Err(Error::domain("QP with no decision variables"));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite QP Hessian"));
    }
    let scale = h.amax().max(1.0);
    if (h - h.transpose()).amax() > 1e-10 * scale {
        return Err(Error::domain("QP Hessian is not symmetric"));
    }
    let eig = SymmetricEigen::new(h.clone()).eigenvalues;
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -1e-10 * scale {
        return Err(Error::domain(format!(
            "QP Hessian is not positive semidefinite (min eigenvalue {min})"
        )));
    }
    Ok(())
}

fn inv_sqrt_norm(v: f64) -> f64 {
    1.0 / v.clamp(1e-4, 1e4).sqrt()
}

/// Ruiz equilibration of the KKT matrix `[H Gᵀ; G 0]` plus a cost scale.
fn equilibrate(h: &DMatrix<f64>, g: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>, f64) {
    let n = h.nrows();
    let m = g.nrows();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut hs = h.clone();
    let mut gs = g.clone();
    for _ in 0..25 {
        let dd = DVector::from_fn(n, |j, _| {
            let col = hs
                .column(j)
                .amax()
                .max(if m > 0 { gs.column(j).amax() } else { 0.0 });
            inv_sqrt_norm(col)
        });
        let ee = DVector::from_fn(m, |i, _| inv_sqrt_norm(gs.row(i).amax()));
        for j in 0..n {
            for i in 0..n {
                hs[(i, j)] *= dd[i] * dd[j];
            }
            for i in 0..m {
                gs[(i, j)] *= ee[i] * dd[j];
            }
        }
        d.component_mul_assign(&dd);
        e.component_mul_assign(&ee);
        if (dd.add_scalar(-1.0).amax()) < 1e-3 && (m == 0 || ee.add_scalar(-1.0).amax() < 1e-3) {
            break;
        }
    }
    let mean_col = (0..n).map(|j| hs.column(j).amax()).sum::<f64>() / n as f64;
    let c = 1.0 / mean_col.clamp(1e-4, 1e4);
    (d, e, c)
}

impl QpSolver {
    pub fn new(h: DMatrix<f64>, g: DMatrix<f64>, settings: QpSettings) -> Result<Self> {
        check_psd(&h)?;
        let n = h.nrows();
        let g = if g.nrows() == 0 {
            DMatrix::zeros(0, n)
        } else {
            g
        };
        if g.ncols() != n {
            return Err(Error::Dimension {
                expected: n,
                got: g.ncols(),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite constraint matrix"));
        }
        let (d, e, c) = equilibrate(&h, &g);
        let hs = DMatrix::from_fn(n, n, |i, j| c * d[i] * h[(i, j)] * d[j]);
        let gs = DMatrix::from_fn(g.nrows(), n, |i, j| e[i] * g[(i, j)] * d[j]);
        let rho = settings.rho;
        let chol = Self::factor(&hs, &gs, settings.sigma, rho)?;
        let h_chol = Cholesky::new(h.clone()).filter(|ch| {
            let diag = ch.l_dirty().diagonal();
            let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| {
                (lo.min(v.abs()), hi.max(v.abs()))
            });
            lo > 1e-7 * hi
        });
        Ok(Self {
            h,
            g,
            hs,
            gs,
            d,
            e,
            c,
            settings,
            rho,
            chol,
            h_chol,
            warm: None,
        })
    }

    fn factor(
        h: &DMatrix<f64>,
        g: &DMatrix<f64>,
        sigma: f64,
        rho: f64,
    ) -> Result<Cholesky<f64, Dyn>> {
        let n = h.nrows();
        let m = h + DMatrix::identity(n, n) * sigma + g.tr_mul(g) * rho;
        Cholesky::new(m).ok_or_else(|| Error::domain("ADMM system matrix is not positive definite"))
    }

    pub fn settings(&self) -> &QpSettings {
        &self.settings
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn constraints(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn set_warm_start(&mut self, z: DVector<f64>, y: DVector<f64>) {
        if z.len() == self.h.nrows() && y.len() == self.g.nrows() {
            self.warm = Some((z, y));
        }
    }

    pub fn clear_warm_start(&mut self) {
        self.warm = None;
    }

    pub fn solve(&mut self, f: &DVector<f64>, hvec: &DVector<f64>) -> QpSolution {
        let n = self.h.nrows();
        let m = self.g.nrows();
        let s = self.settings;
        let (x0, y0) = match self.warm.take() {
            Some((z, y)) => (z, y.map(|v| v.max(0.0))),
            None => (DVector::zeros(n), DVector::zeros(m)),
        };

        // a good warm start (or no constraints at all) may already polish cleanly
        let guess: Vec<bool> = y0.iter().map(|&v| v > 0.0).collect();
        if let Some(sol) = self.try_polish(f, hvec, guess, 0, false, 6) {
            self.store_warm(&sol);
            return sol;
        }
        if let Some(sol) = self.dual_active_set(f, hvec) {
            self.store_warm(&sol);
            return sol;
        }

        let fs = f.component_mul(&self.d) * self.c;
        let hs_vec = hvec.component_mul(&self.e);
        let mut x = x0.component_div(&self.d);
        let mut y = y0.component_div(&self.e) * self.c;
        let mut zeta = (&self.gs * &x).zip_map(&hs_vec, |a, b| a.min(b));
        let mut y_prev = y.clone();
        let mut polish_failed_at = f64::INFINITY;

        for it in 1..=s.max_iter {
            let rhs = &x * s.sigma - &fs + self.gs.tr_mul(&(&zeta * self.rho - &y));
            let x_tilde = self.chol.solve(&rhs);
            let z_tilde = &self.gs * &x_tilde;
            x = &x_tilde * s.alpha + &x * (1.0 - s.alpha);
            let z_relaxed = &z_tilde * s.alpha + &zeta * (1.0 - s.alpha);
            let v = &z_relaxed + &y / self.rho;
            let zeta_new = v.zip_map(&hs_vec, |a, b| a.min(b));
            y += (&z_relaxed - &zeta_new) * self.rho;
            zeta = zeta_new;

            if it % s.check_every != 0 {
                continue;
            }
            if !x.iter().chain(y.iter()).all(|v| v.is_finite()) || y.amax() > 1e14 {
                return self.finish(
                    f,
                    hvec,
                    x.component_mul(&self.d),
                    y.component_mul(&self.e) / self.c,
                    QpStatus::Infeasible,
                    it,
                );
            }

            // residuals of the original problem
            let gx_s = &self.gs * &x;
            let hx_s = &self.hs * &x;
            let gty_s = self.gs.tr_mul(&y);
            let r_prim = if m == 0 {
                0.0
            } else {
                (&gx_s - &zeta).component_div(&self.e).amax()
            };
            let r_dual = (&hx_s + &fs + &gty_s).component_div(&self.d).amax() / self.c;
            let prim_scale = gx_s
                .component_div(&self.e)
                .amax()
                .max(zeta.component_div(&self.e).amax());
            let dual_scale = hx_s
                .component_div(&self.d)
                .amax()
                .max(gty_s.component_div(&self.d).amax())
                .max(fs.component_div(&self.d).amax())
                / self.c;

            let admm_accuracy = (r_prim / (1.0 + prim_scale)).max(r_dual / (1.0 + dual_scale));
            if admm_accuracy <= s.polish_trigger && admm_accuracy < 0.1 * polish_failed_at {
                let slack = &hs_vec - &gx_s;
                let guess: Vec<bool> = (0..m).map(|i| y[i] > slack[i]).collect();
                if let Some(mut sol) = self.try_polish(f, hvec, guess, it, true, 30 + 4 * m) {
                    sol.iterations = it;
                    self.store_warm(&sol);
                    return sol;
                }
                polish_failed_at = admm_accuracy;
            }
            if r_prim <= s.tol && r_dual <= s.tol {
                let (xu, yu) = (x.component_mul(&self.d), y.component_mul(&self.e) / self.c);
                if kkt_residuals(&self.h, &self.g, f, hvec, &xu, &yu).max() <= s.tol {
                    let sol = self.finish(f, hvec, xu, yu, QpStatus::Optimal, it);
                    self.store_warm(&sol);
                    return sol;
                }
            }

            // Farkas certificate: δy ≥ 0 with Gᵀδy ≈ 0 and hᵀδy < 0
            if m > 0 {
                let dy = (&y - &y_prev).component_mul(&self.e) / self.c;
                let dy_norm = dy.amax();
                if dy_norm > 1e-12 {
                    let eps = 1e-5 * dy_norm;
                    let gt_dy = self.g.tr_mul(&dy).amax();
                    let h_dy = hvec.dot(&dy);
                    let neg = dy.iter().fold(0.0f64, |acc, d| acc.max(-d));
                    if gt_dy <= eps && h_dy < -eps && neg <= eps {
                        return self.finish(
                            f,
                            hvec,
                            x.component_mul(&self.d),
                            y.component_mul(&self.e) / self.c,
                            QpStatus::Infeasible,
                            it,
                        );
                    }
                }
                y_prev.copy_from(&y);
            }

            if it % (5 * s.check_every) == 0 && m > 0 {
                let ps = gx_s.amax().max(zeta.amax()).max(1e-12);
                let ds = hx_s.amax().max(gty_s.amax()).max(fs.amax()).max(1e-12);
                let rp = (&gx_s - &zeta).amax() / ps;
                let rd = (&hx_s + &fs + &gty_s).amax() / ds;
                let ratio = (rp / rd.max(1e-300)).sqrt();
                if ratio.is_finite() && !(0.2..=5.0).contains(&ratio) {
                    let new_rho = (self.rho * ratio).clamp(1e-6, 1e6);
                    if let Ok(chol) = Self::factor(&self.hs, &self.gs, s.sigma, new_rho) {
                        self.rho = new_rho;
                        self.chol = chol;
                    }
                }
            }
        }
        let (xu, yu) = (x.component_mul(&self.d), y.component_mul(&self.e) / self.c);
        let kkt = kkt_residuals(&self.h, &self.g, f, hvec, &xu, &yu).max();
        let status = if kkt <= s.tol {
            QpStatus::Optimal
        } else {
            QpStatus::MaxIter
        };
        self.finish(f, hvec, xu, yu, status, s.max_iter)
    }

    fn store_warm(&mut self, sol: &QpSolution) {
        if sol.status == QpStatus::Optimal {
            self.warm = Some((sol.z_star.clone(), sol.y.clone()));
        }
    }

    fn finish(
        &self,
        f: &DVector<f64>,
        hvec: &DVector<f64>,
        x: DVector<f64>,
        y: DVector<f64>,
        status: QpStatus,
        iterations: usize,
    ) -> QpSolution {
        let kkt = kkt_residuals(&self.h, &self.g, f, hvec, &x, &y).max();
        let objective = 0.5 * x.dot(&(&self.h * &x)) + f.dot(&x);
        QpSolution {
            z_star: x,
            y,
            objective,
            kkt_residual: kkt,
            status,
            iterations,
            polished: false,
        }
    }

    /// Primal-dual active-set correction starting from a guessed active set.
    fn try_polish(
        &self,
        f: &DVector<f64>,
        hvec: &DVector<f64>,
        mut active: Vec<bool>,
        iterations: usize,
        mut pdas: bool,
        max_steps: usize,
    ) -> Option<QpSolution> {
        let m = self.g.nrows();
        let tol = self.settings.tol;
        let mut seen: HashSet<Vec<bool>> = HashSet::new();
        for _ in 0..max_steps {
            let (z, lam) = self.solve_equality(f, hvec, &active)?;
            let mut y_full = DVector::zeros(m);
            for (k, i) in (0..m).filter(|&i| active[i]).enumerate() {
                y_full[i] = lam[k];
            }
            let res = kkt_residuals(&self.h, &self.g, f, hvec, &z, &y_full);
            if res.max() <= tol {
                let objective = 0.5 * z.dot(&(&self.h * &z)) + f.dot(&z);
                return Some(QpSolution {
                    z_star: z,
                    y: y_full,
                    objective,
                    kkt_residual: res.max(),
                    status: QpStatus::Optimal,
                    iterations,
                    polished: true,
                });
            }
            let gz = &self.g * &z;
            let single = || -> Option<Vec<bool>> {
                let mut next = active.clone();
                let drop = (0..m)
                    .filter(|&i| active[i] && y_full[i] < -tol)
                    .min_by(|&a, &b| y_full[a].total_cmp(&y_full[b]));
                if let Some(i) = drop {
                    next[i] = false;
                    return Some(next);
                }
                let add = (0..m)
                    .filter(|&i| !active[i] && gz[i] - hvec[i] > tol)
                    .max_by(|&a, &b| (gz[a] - hvec[a]).total_cmp(&(gz[b] - hvec[b])));
                add.map(|i| {
                    next[i] = true;
                    next
                })
            };
            // primal-dual update of the whole set first, one change at a time once that cycles
            let mut next = if pdas {
                (0..m)
                    .map(|i| {
                        if active[i] {
                            y_full[i] > -tol
                        } else {
                            gz[i] - hvec[i] > tol
                        }
                    })
                    .collect()
            } else {
                single()?
            };
            seen.insert(active.clone());
            if next == active || seen.contains(&next) {
                if !pdas {
                    return None;
                }
                pdas = false;
                next = single()?;
                if seen.contains(&next) {
                    return None;
                }
            }
            active = next;
        }
        None
    }

    /// Dual active-set method for positive definite `H` (Goldfarb–Idnani
    /// pattern): start from the unconstrained minimizer and repeatedly bring
    /// the most violated constraint into a linearly independent active set,
    /// dropping constraints whose multipliers would turn negative. Returns
    /// `None` when the iteration breaks down numerically.
    fn dual_active_set(&self, f: &DVector<f64>, hvec: &DVector<f64>) -> Option<QpSolution> {
        let h_chol = self.h_chol.as_ref()?;
        let n = self.h.nrows();
        let m = self.g.nrows();
        let feas_tol = 0.1 * self.settings.tol;
        let h_norm = self.h.amax().max(1e-300);
        let mut x = h_chol.solve(&(-f));
        let mut active: Vec<usize> = Vec::new();
        let mut y = DVector::<f64>::zeros(m);
        let mut steps = 0usize;
        let max_steps = 10 * (n + m) + 50;
        loop {
            let viol = &self.g * &x - hvec;
            let Some(p) = (0..m)
                .filter(|&i| viol[i] > feas_tol)
                .max_by(|&a, &b| viol[a].total_cmp(&viol[b]))
            else {
                break;
            };
            let gp = self.g.row(p).transpose();
            let gp_sq = gp.norm_squared();
            loop {
                steps += 1;
                if steps > max_steps {
                    return None;
                }
                let (dx, dy) = self.kkt_direction(&active, &gp)?;
                let curvature = -gp.dot(&dx);
                let primal_step = curvature > 1e-12 * gp_sq / h_norm;
                let t_full = if primal_step {
                    (gp.dot(&x) - hvec[p]) / curvature
                } else {
                    f64::INFINITY
                };
                let mut t_dual = f64::INFINITY;
                let mut block = None;
                for (k, &i) in active.iter().enumerate() {
                    if dy[k] < 0.0 {
                        let t = y[i] / -dy[k];
                        if t < t_dual {
                            t_dual = t;
                            block = Some(k);
                        }
                    }
                }
                if !primal_step && block.is_none() {
                    // g_p is a non-negative combination of active rows: no x satisfies them all
                    let objective = 0.5 * x.dot(&(&self.h * &x)) + f.dot(&x);
                    let kkt = kkt_residuals(&self.h, &self.g, f, hvec, &x, &y).max();
                    return Some(QpSolution {
                        z_star: x,
                        y,
                        objective,
                        kkt_residual: kkt,
                        status: QpStatus::Infeasible,
                        iterations: 0,
                        polished: false,
                    });
                }
                let t = t_full.min(t_dual);
                if !t.is_finite() || t < 0.0 {
                    return None;
                }
                if primal_step {
                    x += &dx * t;
                }
                for (k, &i) in active.iter().enumerate() {
                    y[i] = (y[i] + t * dy[k]).max(0.0);
                }
                y[p] += t;
                if t_full <= t_dual {
                    active.push(p);
                    break;
                }
                let k = block?;
                y[active[k]] = 0.0;
                active.remove(k);
            }
        }
        // refine on the final active set
        let mask: Vec<bool> = (0..m).map(|i| active.contains(&i)).collect();
        if let Some(sol) = self.try_polish(f, hvec, mask, 0, false, 3) {
            return Some(sol);
        }
        let kkt = kkt_residuals(&self.h, &self.g, f, hvec, &x, &y).max();
        if kkt <= self.settings.tol {
            let objective = 0.5 * x.dot(&(&self.h * &x)) + f.dot(&x);
            return Some(QpSolution {
                z_star: x,
                y,
                objective,
                kkt_residual: kkt,
                status: QpStatus::Optimal,
                iterations: 0,
                polished: true,
            });
        }
        None
    }

    /// Solves `[H G_Aᵀ; G_A 0]·(dx, dy) = (−g_p, 0)`.
    fn kkt_direction(
        &self,
        active: &[usize],
        gp: &DVector<f64>,
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = self.h.nrows();
        let k = active.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&self.h);
        for (r, &i) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = self.g[(i, j)];
                kkt[(j, n + r)] = self.g[(i, j)];
            }
        }
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-gp));
        let lu = LU::new(kkt.clone());
        let mut sol = lu.solve(&rhs)?;
        let resid = &rhs - &kkt * &sol;
        sol += lu.solve(&resid)?;
        if !sol.iter().all(|v| v.is_finite()) {
            return None;
        }
        Some((sol.rows(0, n).into_owned(), sol.rows(n, k).into_owned()))
    }

    /// Solves the equality-constrained QP on the rows flagged `active` with a
    /// regularized KKT factorization plus iterative refinement.
    fn solve_equality(
        &self,
        f: &DVector<f64>,
        hvec: &DVector<f64>,
        active: &[bool],
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        let n = self.h.nrows();
        let rows: Vec<usize> = (0..active.len()).filter(|&i| active[i]).collect();
        let k = rows.len();
        let dim = n + k;
        let delta = 1e-11 * self.h.amax().max(1.0);
        let mut kkt = DMatrix::zeros(dim, dim);
        kkt.view_mut((0, 0), (n, n)).copy_from(&self.h);
        for (r, &i) in rows.iter().enumerate() {
            for j in 0..n {
                let v = self.g[(i, j)];
                kkt[(n + r, j)] = v;
                kkt[(j, n + r)] = v;
            }
        }
        let exact = kkt.clone();
        for d in 0..n {
            kkt[(d, d)] += delta;
        }
        for d in n..dim {
            kkt[(d, d)] -= delta;
        }
        let lu = LU::new(kkt);
        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, n).copy_from(&(-f));
        for (r, &i) in rows.iter().enumerate() {
            rhs[n + r] = hvec[i];
        }
        let mut sol = lu.solve(&rhs)?;
        for _ in 0..6 {
            let resid = &rhs - &exact * &sol;
            if resid.amax() <= 1e-15 * (1.0 + rhs.amax()) {
                break;
            }
            sol += lu.solve(&resid)?;
        }
        if !sol.iter().all(|v| v.is_finite()) {
            return None;
        }
        Some((sol.rows(0, n).into_owned(), sol.rows(n, k).into_owned()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(h: f64, f: f64, g: f64, b: f64) -> QpProblem {
        QpProblem::new(
            DMatrix::from_element(1, 1, h),
            DVector::from_element(1, f),
            DMatrix::from_element(1, 1, g),
            DVector::from_element(1, b),
        )
        .unwrap()
    }

    #[test]
    fn clamped_scalar() {
        // (z−1)² = z² − 2z + 1  →  H = 2, f = −2
        let s = solve_qp(&scalar(2.0, -2.0, 1.0, 0.5), 1e-10, 1000).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z_star[0] - 0.5).abs() < 1e-9);
        assert!((s.y[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn symmetric_active_constraint() {
        let p = QpProblem::new(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-2.0, -2.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        let s = solve_qp(&p, 1e-10, 1000).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z_star[0] - 0.5).abs() < 1e-9 && (s.z_star[1] - 0.5).abs() < 1e-9);
        assert!((s.y[0] - 1.5).abs() < 1e-8);
    }

    #[test]
    fn unconstrained_matches_linear_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.random_range(1..12);
            let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
            let f = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
            let p = QpProblem::new(
                h.clone(),
                f.clone(),
                DMatrix::zeros(0, n),
                DVector::zeros(0),
            )
            .unwrap();
            let s = solve_qp(&p, 1e-9, 1000).unwrap();
            let direct = h.lu().solve(&(-f)).unwrap();
            assert_eq!(s.status, QpStatus::Optimal);
            assert!((s.z_star - direct).amax() < 1e-8);
        }
    }

    #[test]
    fn rejects_indefinite_hessian() {
        let p = QpProblem::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            DVector::zeros(2),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
        )
        .unwrap();
        assert!(matches!(solve_qp(&p, 1e-8, 100), Err(Error::Domain(_))));
    }

    #[test]
    fn detects_infeasibility() {
        // z ≤ −1 and −z ≤ −1 (z ≥ 1)
        let p = QpProblem::new(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            DVector::from_vec(vec![-1.0, -1.0]),
        )
        .unwrap();
        let s = solve_qp(&p, 1e-8, 20_000).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
    }

    #[test]
    fn psd_hessian_with_bounding_constraints() {
        // min −z1 with H = diag(0, 1): optimum pinned by z1 ≤ 2
        let p = QpProblem::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]),
            DVector::from_vec(vec![-1.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]),
            DVector::from_vec(vec![2.0, 2.0]),
        )
        .unwrap();
        let s = solve_qp(&p, 1e-9, 5000).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert!((s.z_star[0] - 2.0).abs() < 1e-9 && s.z_star[1].abs() < 1e-9);
    }

    #[test]
    fn warm_start_reuses_solution() {
        let p = QpProblem::new(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-2.0, -2.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        let mut solver = QpSolver::new(p.h.clone(), p.g.clone(), QpSettings::default()).unwrap();
        let cold = solver.solve(&p.f, &p.hvec);
        let warm = solver.solve(&p.f, &p.hvec);
        assert_eq!(warm.status, QpStatus::Optimal);
        assert_eq!(warm.iterations, 0);
        assert!((cold.z_star - warm.z_star).amax() < 1e-12);
    }
}
