//! Tube-based predictive safety filter.
//!
//! Offline, [`build_config`] computes the LQR tube gain, the disturbance
//! invariant set `Z`, the tightened constraints and a terminal set. Online,
//! [`SafetyFilter::certify`] solves a condensed QP that stays as close as
//! possible to the learning agent's proposal and applies the tube control law.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, Matrix2, RowVector2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CarFollowingState, ConstraintSpec, DisturbanceSpec, ModelParams};
use crate::numerics::{solve_dare_2x2, QpProblem, QpSettings, QpSolver, QpStatus};
use crate::sets::{
    invariance_check, linear_map_row, mrpi_approx, pontryagin_diff, simplify_invariant,
    spectral_radius, support_unchecked, ConvexPolygon, HalfspaceSet, MrpiSettings, Point,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmpcWeights {
    pub horizon: usize,
    pub qw: [f64; 2],
    pub rw: f64,
    pub rl: f64,
    /// Steps the current PV acceleration is held before decaying.
    pub n_hold: usize,
    pub mrpi_eps: f64,
    /// Relative enlargement allowed when reducing the facet count of `Z`.
    pub tube_growth: f64,
}

impl Default for RmpcWeights {
    fn default() -> Self {
        Self {
            horizon: 50,
            qw: [1.0, 1.0],
            rw: 1.0,
            rl: 50.0,
            n_hold: 4,
            mrpi_eps: 1e-3,
            tube_growth: 0.02,
        }
    }
}

impl RmpcWeights {
    pub fn with_horizon(self, horizon: usize) -> Self {
        Self { horizon, ..self }
    }

    pub fn qw_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.qw[0], 0.0, 0.0, self.qw[1])
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RmpcConfig {
    pub horizon: usize,
    pub qw: Matrix2<f64>,
    pub rw: f64,
    pub pw: Matrix2<f64>,
    pub rl: f64,
    pub k: RowVector2<f64>,
    pub z: ConvexPolygon,
    pub x: HalfspaceSet,
    pub u: (f64, f64),
    pub xbar: HalfspaceSet,
    pub ubar: (f64, f64),
    pub xf: HalfspaceSet,
    pub w: ConvexPolygon,
    pub model: ModelParams,
    pub n_hold: usize,
    pub mrpi_terms: usize,
}

impl RmpcConfig {
    /// Closed-loop matrix `A + Bc·K`.
    pub fn a_k(&self) -> Matrix2<f64> {
        self.model.a() + self.model.bc() * self.k
    }
}

/// `{x : x1 ≥ −x1_min, −x2_min ≤ x2 ≤ x2_max}`.
pub fn state_constraint_set(cs: &ConstraintSpec) -> Result<HalfspaceSet> {
    HalfspaceSet::from_bounds(Some(-cs.x1_min), None, Some(-cs.x2_min), Some(cs.x2_max))
}

/// `U ⊖ K·Z` for an interval `U = [lo, hi]`.
pub fn tighten_input(u: (f64, f64), k: &RowVector2<f64>, z: &ConvexPolygon) -> Result<(f64, f64)> {
    let (kz_lo, kz_hi) = linear_map_row(k, z);
    let lo = u.0 - kz_lo;
    let hi = u.1 - kz_hi;
    if lo > hi {
        return Err(Error::TighteningInfeasible {
            row: 0,
            detail: format!("input interval [{}, {}] shrinks to [{lo}, {hi}]", u.0, u.1),
        });
    }
    Ok((lo, hi))
}

const MAS_MAX_STEPS: usize = 1000;

/// Maximal admissible set of `x⁺ = A_K·x` inside `{F·x ≤ g}`: rows
/// `F·A_K^t·x ≤ g` are appended until a whole batch is redundant.
pub fn maximal_admissible_set(
    a_k: &Matrix2<f64>,
    constraints: &HalfspaceSet,
) -> Result<HalfspaceSet> {
    let rho = spectral_radius(a_k);
    if !(rho < 1.0) {
        return Err(Error::NotStable(rho));
    }
    let base: Vec<(Point, f64)> = constraints.rows().collect();
    let mut rows = base.clone();
    let mut power = *a_k;
    for _ in 0..MAS_MAX_STEPS {
        let set = HalfspaceSet::new(
            rows.iter().map(|r| r.0).collect(),
            rows.iter().map(|r| r.1).collect(),
        )?;
        let poly = set
            .clip_to_box(1e6 * (1.0 + rows.iter().fold(0.0f64, |m, r| m.max(r.1.abs()))))
            .ok_or_else(|| Error::TerminalSetEmpty("admissible set became empty".into()))?;
        let fresh: Vec<(Point, f64)> = base
            .iter()
            .map(|(f, g)| (power.transpose() * f, *g))
            .filter(|(d, g)| {
                d.norm() > 0.0 && support_unchecked(&poly, *d) > g + 1e-9 * (1.0 + g.abs())
            })
            .collect();
        if fresh.is_empty() {
            if set.is_bounded() {
                return poly.to_halfspaces();
            }
            return Ok(set);
        }
        rows.extend(fresh);
        power *= a_k;
    }
    Err(Error::TerminalSetEmpty(format!(
        "no finite determination within {MAS_MAX_STEPS} steps"
    )))
}

pub fn build_config(
    cs: &ConstraintSpec,
    ds: &DisturbanceSpec,
    model: &ModelParams,
    weights: &RmpcWeights,
) -> Result<RmpcConfig> {
    cs.validate()?;
    ds.validate(model)?;
    if weights.horizon == 0 {
        return Err(Error::domain("horizon must be at least one step"));
    }
    if !(weights.rw > 0.0 && weights.rl >= 0.0 && weights.qw.iter().all(|q| *q > 0.0)) {
        return Err(Error::domain(format!("invalid MPC weights {weights:?}")));
    }
    let a = model.a();
    let bc = model.bc();
    let qw = weights.qw_matrix();
    let (pw, k) = solve_dare_2x2(&a, &bc, &qw, weights.rw, 1e-10)?;
    let a_k = a + bc * k;

    let w = if ds.c_w > 0.0 {
        ConvexPolygon::inf_ball(ds.c_w)?
    } else {
        ConvexPolygon::origin()
    };
    let mrpi = mrpi_approx(
        &a_k,
        &w,
        &MrpiSettings {
            eps: weights.mrpi_eps,
            ..MrpiSettings::default()
        },
    )?;
    let extent = mrpi
        .set
        .vertices()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.amax()));
    // a slightly inflated tube has slack to shed nearly parallel facets
    let inflated = mrpi.set.scale(1.0 + weights.tube_growth);
    let z = simplify_invariant(&a_k, &inflated, &w, weights.tube_growth * extent)?;
    let inv = invariance_check(&a_k, &z, &w, 1e-9)?;
    if !inv.invariant {
        return Err(Error::domain(format!(
            "tube set failed invariance check (margin {})",
            inv.worst_margin
        )));
    }

    let x = state_constraint_set(cs)?;
    let u = (-cs.u_min, cs.u_max);
    let xbar = pontryagin_diff(&x, &z)?;
    let ubar = tighten_input(u, &k, &z).map_err(|e| match e {
        Error::TighteningInfeasible { detail, .. } => Error::TighteningInfeasible {
            row: x.len(),
            detail,
        },
        other => other,
    })?;

    let mut rows: Vec<Point> = xbar.rows().map(|r| r.0).collect();
    let mut offs: Vec<f64> = xbar.offsets().to_vec();
    let kv = Point::new(k[0], k[1]);
    if kv.norm() > 0.0 {
        rows.extend([kv, -kv]);
        offs.extend([ubar.1, -ubar.0]);
    }
    let admissible = HalfspaceSet::new(rows, offs)?;
    let xf = maximal_admissible_set(&a_k, &admissible)?;
    if !xf.contains(Point::zeros(), 0.0) {
        return Err(Error::TerminalSetEmpty(
            "terminal set does not contain the equilibrium".into(),
        ));
    }
    debug!(
        "tube: {} vertices from {} terms; terminal set: {} rows",
        z.len(),
        mrpi.terms,
        xf.len()
    );

    Ok(RmpcConfig {
        horizon: weights.horizon,
        qw,
        rw: weights.rw,
        pw,
        rl: weights.rl,
        k,
        z,
        x,
        u,
        xbar,
        ubar,
        xf,
        w,
        model: *model,
        n_hold: weights.n_hold,
        mrpi_terms: mrpi.terms,
    })
}

/// Hold `abar` for `n_hold` steps, then decay linearly to zero at the last step.
pub fn predict_pv_profile(abar: f64, horizon: usize, n_hold: usize) -> Vec<f64> {
    (0..horizon)
        .map(|i| {
            if i < n_hold {
                abar
            } else {
                abar * (horizon - 1 - i) as f64 / (horizon - n_hold) as f64
            }
        })
        .collect()
}

/// Condensed prediction: `x̄_i = Φ_i·z + Γ_i·ā`, with `z = (x̄₀, ū₀..ū_{N−1})`.
#[derive(Debug, Clone)]
struct Condensed {
    n: usize,
    phi: Vec<DMatrix<f64>>,
    gamma: Vec<DMatrix<f64>>,
    hess: DMatrix<f64>,
    g: DMatrix<f64>,
    n_x_rows: usize,
    n_u_rows: usize,
}

impl Condensed {
    fn new(cfg: &RmpcConfig) -> Self {
        let big_n = cfg.horizon;
        let n = 2 + big_n;
        let a = DMatrix::from_column_slice(2, 2, cfg.model.a().as_slice());
        let bc = cfg.model.bc();
        let b = cfg.model.b();
        let mut phi = Vec::with_capacity(big_n + 1);
        let mut gamma = Vec::with_capacity(big_n + 1);
        let mut p0 = DMatrix::zeros(2, n);
        p0[(0, 0)] = 1.0;
        p0[(1, 1)] = 1.0;
        phi.push(p0);
        gamma.push(DMatrix::zeros(2, big_n));
        for i in 0..big_n {
            let mut p = &a * &phi[i];
            p[(0, 2 + i)] += bc[0];
            p[(1, 2 + i)] += bc[1];
            let mut gm = &a * &gamma[i];
            gm[(0, i)] += b[0];
            gm[(1, i)] += b[1];
            phi.push(p);
            gamma.push(gm);
        }

        let q = DMatrix::from_column_slice(2, 2, cfg.qw.as_slice());
        let pw = DMatrix::from_column_slice(2, 2, cfg.pw.as_slice());
        let mut hess = DMatrix::zeros(n, n);
        for p in &phi[..big_n] {
            hess += p.transpose() * &q * p;
        }
        hess += phi[big_n].transpose() * &pw * &phi[big_n];
        for i in 0..big_n {
            hess[(2 + i, 2 + i)] += cfg.rw;
        }
        hess[(2, 2)] += cfg.rl;
        hess *= 2.0;
        hess = (&hess + hess.transpose()) * 0.5;

        let n_x_rows = cfg.xbar.len() * big_n;
        let n_u_rows = 2 * big_n;
        let n_f_rows = cfg.xf.len();
        let n_z_rows = cfg.z.facets().len();
        let m = n_x_rows + n_u_rows + n_f_rows + n_z_rows;
        let mut g = DMatrix::zeros(m, n);
        let mut r = 0;
        for p in &phi[..big_n] {
            for (row, _) in cfg.xbar.rows() {
                g.row_mut(r).copy_from(&(row.transpose() * p));
                r += 1;
            }
        }
        for i in 0..big_n {
            g[(r, 2 + i)] = 1.0;
            g[(r + 1, 2 + i)] = -1.0;
            r += 2;
        }
        for (row, _) in cfg.xf.rows() {
            g.row_mut(r).copy_from(&(row.transpose() * &phi[big_n]));
            r += 1;
        }
        for (row, _) in cfg.z.facets() {
            g[(r, 0)] = -row[0];
            g[(r, 1)] = -row[1];
            r += 1;
        }
        Self {
            n,
            phi,
            gamma,
            hess,
            g,
            n_x_rows,
            n_u_rows,
        }
    }

    fn offsets(
        &self,
        x_meas: Point,
        u_l: f64,
        profile: &[f64],
        cfg: &RmpcConfig,
    ) -> (DVector<f64>, DVector<f64>) {
        let big_n = cfg.horizon;
        let abar = DVector::from_column_slice(profile);
        let c: Vec<Vector2<f64>> = self
            .gamma
            .iter()
            .map(|gm| {
                let v = gm * &abar;
                Vector2::new(v[0], v[1])
            })
            .collect();
        let q = cfg.qw;
        let mut f = DVector::zeros(self.n);
        for i in 0..big_n {
            let w = q * c[i];
            f += self.phi[i].transpose() * DVector::from_column_slice(w.as_slice());
        }
        let wn = cfg.pw * c[big_n];
        f += self.phi[big_n].transpose() * DVector::from_column_slice(wn.as_slice());
        f[2] -= cfg.rl * u_l;
        f *= 2.0;

        let mut h = DVector::zeros(self.g.nrows());
        let mut r = 0;
        for ci in &c[..big_n] {
            for (row, off) in cfg.xbar.rows() {
                h[r] = off - row.dot(ci);
                r += 1;
            }
        }
        for _ in 0..big_n {
            h[r] = cfg.ubar.1;
            h[r + 1] = -cfg.ubar.0;
            r += 2;
        }
        for (row, off) in cfg.xf.rows() {
            h[r] = off - row.dot(&c[big_n]);
            r += 1;
        }
        for (row, off) in cfg.z.facets() {
            h[r] = off - row.dot(&x_meas);
            r += 1;
        }
        (f, h)
    }

    fn states(&self, z: &DVector<f64>, profile: &[f64]) -> Vec<Vector2<f64>> {
        let abar = DVector::from_column_slice(profile);
        self.phi
            .iter()
            .zip(&self.gamma)
            .map(|(p, gm)| {
                let v = p * z + gm * &abar;
                Vector2::new(v[0], v[1])
            })
            .collect()
    }
}

/// Condensed QP for one filter step.
pub fn assemble_qp(
    x_meas: CarFollowingState,
    u_l: f64,
    profile: &[f64],
    cfg: &RmpcConfig,
) -> Result<QpProblem> {
    if profile.len() != cfg.horizon {
        return Err(Error::Dimension {
            expected: cfg.horizon,
            got: profile.len(),
        });
    }
    let c = Condensed::new(cfg);
    let (f, h) = c.offsets(x_meas.to_vector(), u_l, profile, cfg);
    QpProblem::new(c.hess, f, c.g, h)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NominalPlan {
    pub states: Vec<[f64; 2]>,
    pub inputs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertifiedAction {
    pub u_s: f64,
    pub u_l: f64,
    pub ubar0: f64,
    pub xbar0: [f64; 2],
    pub plan: NominalPlan,
    pub qp_status: QpStatus,
    pub iterations: usize,
    pub used_backup: bool,
    /// Signed margin of `x − x̄₀` in `Z`; non-negative means inside the tube.
    pub tube_margin: f64,
}

/// Per-step record written when diagnostics are requested.
#[derive(Debug, Clone, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub qp_status: QpStatus,
    pub iterations: usize,
    pub u_l: f64,
    pub u_s: f64,
    pub tube_margin: f64,
    pub used_backup: bool,
}

impl CertifiedAction {
    pub fn diagnostics(&self, step: usize) -> StepDiagnostics {
        StepDiagnostics {
            step,
            qp_status: self.qp_status,
            iterations: self.iterations,
            u_l: self.u_l,
            u_s: self.u_s,
            tube_margin: self.tube_margin,
            used_backup: self.used_backup,
        }
    }
}

/// Stateful filter: keeps the QP factorization, a warm start and the last feasible plan.
#[derive(Debug, Clone)]
pub struct SafetyFilter {
    cfg: RmpcConfig,
    cond: Condensed,
    solver: QpSolver,
    backup: Option<NominalPlan>,
    infeasible_steps: usize,
}

impl SafetyFilter {
    pub fn new(cfg: RmpcConfig) -> Result<Self> {
        let cond = Condensed::new(&cfg);
        let settings = QpSettings {
            tol: 1e-7,
            max_iter: 20_000,
            ..QpSettings::default()
        };
        let solver = QpSolver::new(cond.hess.clone(), cond.g.clone(), settings)?;
        Ok(Self {
            cfg,
            cond,
            solver,
            backup: None,
            infeasible_steps: 0,
        })
    }

    pub fn config(&self) -> &RmpcConfig {
        &self.cfg
    }

    /// Number of steps on which the QP was infeasible and the backup plan was used.
    pub fn infeasible_steps(&self) -> usize {
        self.infeasible_steps
    }

    /// Forgets warm start and backup plan (start of a new episode).
    pub fn reset(&mut self) {
        self.solver.clear_warm_start();
        self.backup = None;
    }

    pub fn certify(
        &mut self,
        x_meas: CarFollowingState,
        u_l: f64,
        profile: &[f64],
    ) -> Result<CertifiedAction> {
        let cfg = &self.cfg;
        if profile.len() != cfg.horizon {
            return Err(Error::Dimension {
                expected: cfg.horizon,
                got: profile.len(),
            });
        }
        crate::error::ensure_finite("certify", &[x_meas.x1, x_meas.x2, u_l])?;
        crate::error::ensure_finite("PV profile", profile)?;
        let x = x_meas.to_vector();
        let (f, h) = self.cond.offsets(x, u_l, profile, cfg);
        let sol = self.solver.solve(&f, &h);
        if sol.status == QpStatus::Optimal {
            let states = self.cond.states(&sol.z_star, profile);
            let inputs: Vec<f64> = sol.z_star.iter().skip(2).copied().collect();
            let plan = NominalPlan {
                states: states.iter().map(|s| [s[0], s[1]]).collect(),
                inputs,
            };
            let xbar0 = states[0];
            let action = self.apply_tube(
                x,
                u_l,
                xbar0,
                plan.inputs[0],
                &plan,
                sol.status,
                sol.iterations,
                false,
            );
            self.shift_warm_start(&sol.z_star, &sol.y, &states);
            self.backup = Some(plan);
            return Ok(action);
        }
        self.infeasible_steps += 1;
        self.solver.clear_warm_start();
        let Some(prev) = self.backup.take() else {
            return Err(Error::CertificationFailed(format!(
                "QP {:?} with no stored backup plan",
                sol.status
            )));
        };
        warn!("safety QP {:?}; applying shifted backup plan", sol.status);
        let plan = self.shifted_plan(&prev);
        let xbar0 = Vector2::new(plan.states[0][0], plan.states[0][1]);
        let action = self.apply_tube(
            x,
            u_l,
            xbar0,
            plan.inputs[0],
            &plan,
            sol.status,
            sol.iterations,
            true,
        );
        self.backup = Some(plan);
        Ok(action)
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_tube(
        &self,
        x: Vector2<f64>,
        u_l: f64,
        xbar0: Vector2<f64>,
        ubar0: f64,
        plan: &NominalPlan,
        status: QpStatus,
        iterations: usize,
        used_backup: bool,
    ) -> CertifiedAction {
        let cfg = &self.cfg;
        let e = x - xbar0;
        let raw = ubar0 + (cfg.k * e)[0];
        // ū₀ ∈ Ū and K·e ∈ K·Z already place u_s in U; the clamp only absorbs rounding
        let u_s = raw.clamp(cfg.u.0, cfg.u.1);
        CertifiedAction {
            u_s,
            u_l,
            ubar0,
            xbar0: [xbar0[0], xbar0[1]],
            plan: plan.clone(),
            qp_status: status,
            iterations,
            used_backup,
            tube_margin: cfg.z.membership_margin(e),
        }
    }

    /// Previous plan advanced one step, closed with the terminal feedback.
    fn shifted_plan(&self, prev: &NominalPlan) -> NominalPlan {
        let a_k = self.cfg.a_k();
        let last = prev.states.last().copied().unwrap_or([0.0, 0.0]);
        let last_v = Vector2::new(last[0], last[1]);
        let mut states: Vec<[f64; 2]> = prev.states.iter().skip(1).copied().collect();
        let next = a_k * last_v;
        states.push([next[0], next[1]]);
        let mut inputs: Vec<f64> = prev.inputs.iter().skip(1).copied().collect();
        inputs.push((self.cfg.k * last_v)[0]);
        NominalPlan { states, inputs }
    }

    fn shift_warm_start(&mut self, z: &DVector<f64>, y: &DVector<f64>, states: &[Vector2<f64>]) {
        let big_n = self.cfg.horizon;
        let n = self.cond.n;
        let mut z_next = DVector::zeros(n);
        z_next[0] = states[1][0];
        z_next[1] = states[1][1];
        for i in 0..big_n - 1 {
            z_next[2 + i] = z[3 + i];
        }
        z_next[n - 1] = (self.cfg.k * states[big_n])[0];

        let nx = self.cfg.xbar.len();
        let mut y_next = y.clone();
        let xr = self.cond.n_x_rows;
        let ur = self.cond.n_u_rows;
        for i in 0..xr {
            y_next[i] = if i + nx < xr { y[i + nx] } else { 0.0 };
        }
        for i in 0..ur {
            y_next[xr + i] = if i + 2 < ur { y[xr + i + 2] } else { 0.0 };
        }
        self.solver.set_warm_start(z_next, y_next);
    }
}

/// One-shot certification without warm start or backup plan.
pub fn certify(
    x_meas: CarFollowingState,
    u_l: f64,
    profile: &[f64],
    cfg: &RmpcConfig,
) -> Result<CertifiedAction> {
    SafetyFilter::new(cfg.clone())?.certify(x_meas, u_l, profile)
}
