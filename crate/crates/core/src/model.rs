//! Longitudinal vehicle kinematics and the car-following error system.
//!
//! Every vehicle is a discrete double integrator `x⁺ = A·x + B·u` with
//! `x = (s, v)`. Under the constant time-headway spacing policy the
//! PV/CAV pair is described by the error state
//! `x = x_p + H·x_c = (s_p − s_c − h·v_c, v_p − v_c)`, which evolves as
//! `x⁺ = A·x + Bc·u_c + B·ā_p + w` with `Bc = H·B`.

use nalgebra::{Matrix2, Vector2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    /// Sampling interval [s].
    pub tau: f64,
    /// Constant time headway of the spacing policy [s].
    pub h: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self { tau: 0.5, h: 0.5 }
    }
}

impl ModelParams {
    pub fn new(tau: f64, h: f64) -> Result<Self> {
        ensure_finite("model params", &[tau, h])?;
        if tau <= 0.0 || h <= 0.0 {
            return Err(Error::domain(format!(
                "tau and h must be positive (tau={tau}, h={h})"
            )));
        }
        Ok(Self { tau, h })
    }

    pub fn a(&self) -> Matrix2<f64> {
        Matrix2::new(1.0, self.tau, 0.0, 1.0)
    }

    pub fn b(&self) -> Vector2<f64> {
        Vector2::new(0.5 * self.tau * self.tau, self.tau)
    }

    pub fn hmat(&self) -> Matrix2<f64> {
        Matrix2::new(-1.0, -self.h, 0.0, -1.0)
    }

    /// Input matrix of the error system, `H·B`.
    pub fn bc(&self) -> Vector2<f64> {
        self.hmat() * self.b()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Position [m].
    pub s: f64,
    /// Velocity [m/s].
    pub v: f64,
}

impl VehicleState {
    pub fn new(s: f64, v: f64) -> Self {
        Self { s, v }
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.s, self.v)
    }

    pub fn from_vector(x: Vector2<f64>) -> Self {
        Self { s: x[0], v: x[1] }
    }
}

/// Error state of the PV/CAV pair: `x1 = s_p − s_c − h·v_c`, `x2 = v_p − v_c`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CarFollowingState {
    pub x1: f64,
    pub x2: f64,
}

impl CarFollowingState {
    pub fn new(x1: f64, x2: f64) -> Self {
        Self { x1, x2 }
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.x1, self.x2)
    }

    pub fn from_vector(x: Vector2<f64>) -> Self {
        Self { x1: x[0], x2: x[1] }
    }
}

/// State and input bounds of the car-following system, all given as positive magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintSpec {
    pub x1_min: f64,
    pub x2_min: f64,
    pub x2_max: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl Default for ConstraintSpec {
    fn default() -> Self {
        Self {
            x1_min: 2.0,
            x2_min: 5.0,
            x2_max: 5.0,
            u_min: 3.0,
            u_max: 3.0,
        }
    }
}

impl ConstraintSpec {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.x1_min,
            self.x2_min,
            self.x2_max,
            self.u_min,
            self.u_max,
        ];
        ensure_finite("constraint spec", &all)?;
        if all.iter().any(|&b| b <= 0.0) {
            return Err(Error::domain(format!(
                "constraint bounds must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-constraint signed margins; a constraint holds iff its margin is `>= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConstraintReport {
    pub x1_lower: f64,
    pub x2_lower: f64,
    pub x2_upper: f64,
    pub u_lower: f64,
    pub u_upper: f64,
}

impl ConstraintReport {
    pub fn margins(&self) -> [f64; 5] {
        [
            self.x1_lower,
            self.x2_lower,
            self.x2_upper,
            self.u_lower,
            self.u_upper,
        ]
    }

    pub fn satisfied(&self) -> bool {
        self.satisfied_within(0.0)
    }

    pub fn satisfied_within(&self, tol: f64) -> bool {
        self.margins().iter().all(|&m| m >= -tol)
    }

    pub fn state_satisfied_within(&self, tol: f64) -> bool {
        self.margins()[..3].iter().all(|&m| m >= -tol)
    }

    pub fn input_satisfied_within(&self, tol: f64) -> bool {
        self.margins()[3..].iter().all(|&m| m >= -tol)
    }

    pub fn worst(&self) -> f64 {
        self.margins().into_iter().fold(f64::INFINITY, f64::min)
    }
}

/// Noise amplitudes of the simulation and the lumped bound `c_w` they must respect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DisturbanceSpec {
    pub c_w: f64,
    pub sigma: f64,
    pub n_p: f64,
    pub n_h: f64,
    pub b_s: f64,
    pub b_v: f64,
}

impl Default for DisturbanceSpec {
    fn default() -> Self {
        Self {
            c_w: 0.3,
            sigma: 0.1,
            n_p: 0.2,
            n_h: 0.05,
            b_s: 0.1,
            b_v: 0.2,
        }
    }
}

impl DisturbanceSpec {
    /// All noise switched off.
    pub fn zero() -> Self {
        Self {
            c_w: 0.0,
            sigma: 0.0,
            n_p: 0.0,
            n_h: 0.0,
            b_s: 0.0,
            b_v: 0.0,
        }
    }

    /// Upper bound on `‖A·Δ_p − B·Δa_p‖∞` implied by the noise amplitudes.
    pub fn lumped_bound(&self, params: &ModelParams) -> f64 {
        let b = params.b();
        let measurement = (self.b_s + params.tau * self.b_v).max(self.b_v);
        let prediction = (b[0].abs() * self.n_p).max(b[1].abs() * self.n_p);
        measurement + prediction
    }

    /// Checks signs and that the noise amplitudes stay inside the ∞-ball of radius `c_w`.
    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        let all = [self.c_w, self.sigma, self.n_p, self.n_h, self.b_s, self.b_v];
        ensure_finite("disturbance spec", &all)?;
        if all.iter().any(|&b| b < 0.0) {
            return Err(Error::domain(format!(
                "disturbance parameters must be nonnegative: {self:?}"
            )));
        }
        let bound = self.lumped_bound(params);
        if bound > self.c_w + 1e-12 {
            return Err(Error::domain(format!(
                "noise amplitudes imply ‖w‖∞ up to {bound}, exceeding c_w = {}",
                self.c_w
            )));
        }
        Ok(())
    }
}

/// One draw of every noise source for a single simulation step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DisturbanceSample {
    /// PV acceleration prediction error [m/s²].
    pub delta_a_p: f64,
    /// PV measurement perturbation (Δs, Δv).
    pub delta_p: Vector2<f64>,
    /// Multiplicative HDV acceleration noise.
    pub delta_a_h: f64,
}

impl DisturbanceSample {
    /// Lumped error-system disturbance `w = A·Δ_p − B·Δa_p`.
    pub fn lumped(&self, params: &ModelParams) -> Vector2<f64> {
        params.a() * self.delta_p - params.b() * self.delta_a_p
    }
}

pub fn step_vehicle(state: VehicleState, u: f64, params: &ModelParams) -> Result<VehicleState> {
    ensure_finite("step_vehicle", &[state.s, state.v, u])?;
    let tau = params.tau;
    Ok(VehicleState {
        s: state.s + tau * state.v + 0.5 * tau * tau * u,
        v: state.v + tau * u,
    })
}

pub fn compose_error_state(
    pv: VehicleState,
    cav: VehicleState,
    params: &ModelParams,
) -> CarFollowingState {
    CarFollowingState {
        x1: pv.s - cav.s - params.h * cav.v,
        x2: pv.v - cav.v,
    }
}

/// Nominal error dynamics `A·x̄ + Bc·ū_c + B·ā_p`.
pub fn step_nominal(
    xbar: CarFollowingState,
    ubar_c: f64,
    abar_p: f64,
    params: &ModelParams,
) -> CarFollowingState {
    let next = params.a() * xbar.to_vector() + params.bc() * ubar_c + params.b() * abar_p;
    CarFollowingState::from_vector(next)
}

/// Disturbed error dynamics; `w` must lie in the ∞-ball of radius `spec.c_w`.
pub fn step_actual(
    x: CarFollowingState,
    u_c: f64,
    abar_p: f64,
    w: Vector2<f64>,
    params: &ModelParams,
    spec: &DisturbanceSpec,
) -> Result<CarFollowingState> {
    let norm = w.amax();
    if !(norm <= spec.c_w + 1e-12) {
        return Err(Error::domain(format!(
            "disturbance ‖w‖∞ = {norm} exceeds c_w = {}",
            spec.c_w
        )));
    }
    let nominal = step_nominal(x, u_c, abar_p, params);
    Ok(CarFollowingState::from_vector(nominal.to_vector() + w))
}

/// Zero-mean normal with standard deviation `sigma`, truncated to `[-bound, bound]` by rejection.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, sigma: f64, bound: f64) -> f64 {
    if sigma <= 0.0 || bound <= 0.0 {
        return 0.0;
    }
    loop {
        let z: f64 = StandardNormal.sample(rng);
        let x = sigma * z;
        if x.abs() <= bound {
            return x;
        }
    }
}

fn symmetric_uniform<R: Rng + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    if bound <= 0.0 {
        0.0
    } else {
        rng.random_range(-bound..=bound)
    }
}

/// Draws (Δa_p, Δ_p, Δa_h) in a fixed order.
pub fn sample_disturbances<R: Rng + ?Sized>(
    spec: &DisturbanceSpec,
    rng: &mut R,
) -> DisturbanceSample {
    let delta_a_p = truncated_normal(rng, spec.sigma, spec.n_p);
    let ds = symmetric_uniform(rng, spec.b_s);
    let dv = symmetric_uniform(rng, spec.b_v);
    let delta_a_h = truncated_normal(rng, spec.sigma, spec.n_h);
    DisturbanceSample {
        delta_a_p,
        delta_p: Vector2::new(ds, dv),
        delta_a_h,
    }
}

pub fn check_constraints(x: CarFollowingState, u: f64, spec: &ConstraintSpec) -> ConstraintReport {
    ConstraintReport {
        x1_lower: x.x1 + spec.x1_min,
        x2_lower: x.x2 + spec.x2_min,
        x2_upper: spec.x2_max - x.x2,
        u_lower: u + spec.u_min,
        u_upper: spec.u_max - u,
    }
}
