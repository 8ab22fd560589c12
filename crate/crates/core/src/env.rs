//! Three-vehicle eco-driving environment: PV ahead, controlled CAV, IDM-driven HDV behind.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::driver::{
    estimated_hdv_accel, idm_accel, step_hdv, BehaviorEstimate, BehaviorSample, EstimatorConfig,
    IdmParams,
};
use crate::energy::{holistic_kj_per_km, power, trip_energy, EnergyCoeffs, TripEnergy};
use crate::error::{ensure_finite, Error, Result};
use crate::filter::{predict_pv_profile, SafetyFilter};
use crate::model::{
    check_constraints, compose_error_state, sample_disturbances, step_vehicle, truncated_normal,
    ConstraintSpec, DisturbanceSpec, ModelParams, VehicleState,
};
use crate::rng::{self, Stream};

/// Constraint violations smaller than this are attributed to rounding.
pub const VIOLATION_TOL: f64 = 1e-9;

/// Bound on the PV acceleration used to follow its velocity profile [m/s²].
pub const PV_ACCEL_LIMIT: f64 = 3.0;

/// Lowest speed of generated PV profiles [m/s]. Above about 4 m/s the gap
/// constraint `s_pc ≥ h·v_c − 2` keeps the vehicles apart.
pub const PROFILE_MIN_SPEED: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// No CAV: the HDV follows the PV directly.
    A,
    /// CAV agent ignoring the HDV in its state and reward.
    B,
    /// CAV agent with the full state and reward.
    C,
}

impl Scenario {
    pub fn state_dim(self) -> usize {
        match self {
            Scenario::A => 0,
            Scenario::B => 3,
            Scenario::C => 5,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Scenario::A => "A",
            Scenario::B => "B",
            Scenario::C => "C",
        }
    }

    pub fn has_cav(self) -> bool {
        self != Scenario::A
    }

    /// Per-feature multipliers applied before observations enter the networks.
    pub fn observation_scale(self) -> Vec<f64> {
        match self {
            Scenario::A => vec![],
            Scenario::B => vec![1.0 / 20.0, 1.0 / 5.0, 1.0 / 10.0],
            Scenario::C => vec![1.0 / 20.0, 1.0 / 20.0, 1.0 / 5.0, 1.0 / 10.0, 1.0 / 10.0],
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Scenario::A),
            "B" => Ok(Scenario::B),
            "C" => Ok(Scenario::C),
            other => Err(Error::domain(format!(
                "unknown scenario {other:?} (expected A, B or C)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub alpha_c: f64,
    pub alpha_h: f64,
    pub alpha_t: f64,
    pub tg_threshold: f64,
    pub ttc_window: f64,
    pub collision_penalty: f64,
    /// Symmetric clip band for the two energy terms.
    pub energy_clip: f64,
    /// Energy reward of the CAV uses the applied input `u_s` (true) or the proposal `u_L`.
    pub use_applied_input: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha_c: 1.0 / 30000.0,
            alpha_h: 1.0 / 30000.0,
            alpha_t: 1.0 / 25.0,
            tg_threshold: 2.5,
            ttc_window: 4.0,
            collision_penalty: -500.0,
            energy_clip: 1.0,
            use_applied_input: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let v = [
            self.alpha_c,
            self.alpha_h,
            self.alpha_t,
            self.tg_threshold,
            self.ttc_window,
            self.energy_clip,
        ];
        ensure_finite("reward config", &v)?;
        ensure_finite("reward config", &[self.collision_penalty])?;
        if v.iter().any(|&x| x <= 0.0) {
            return Err(Error::domain(format!(
                "reward weights must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialConditions {
    pub s_pc: f64,
    pub s_ch: f64,
    pub v_c: f64,
    /// `v_p − v_c` at the start.
    pub dv_pc: f64,
    pub v_h: f64,
}

impl Default for InitialConditions {
    fn default() -> Self {
        Self {
            s_pc: 20.0,
            s_ch: 20.0,
            v_c: 8.5,
            dv_pc: 1.6416,
            v_h: 8.0,
        }
    }
}

impl InitialConditions {
    /// Evaluation start: closer to the PV, otherwise as in training.
    pub fn test() -> Self {
        Self {
            s_pc: 15.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct World {
    pub pv: VehicleState,
    pub cav: VehicleState,
    pub hdv: VehicleState,
}

impl World {
    pub fn from_initial(ic: &InitialConditions) -> Self {
        let hdv = VehicleState::new(0.0, ic.v_h);
        let cav = VehicleState::new(ic.s_ch, ic.v_c);
        let pv = VehicleState::new(ic.s_ch + ic.s_pc, ic.v_c + ic.dv_pc);
        Self { pv, cav, hdv }
    }

    pub fn s_pc(&self) -> f64 {
        self.pv.s - self.cav.s
    }

    pub fn s_ch(&self) -> f64 {
        self.cav.s - self.hdv.s
    }

    /// Gap of the HDV to whichever vehicle it follows.
    pub fn hdv_gap(&self, scenario: Scenario) -> f64 {
        if scenario.has_cav() {
            self.s_ch()
        } else {
            self.pv.s - self.hdv.s
        }
    }

    pub fn hdv_leader_speed(&self, scenario: Scenario) -> f64 {
        if scenario.has_cav() {
            self.cav.v
        } else {
            self.pv.v
        }
    }
}

/// Agent state vector for the scenario.
pub fn observe(world: &World, scenario: Scenario) -> Vec<f64> {
    let (s_pc, dv, v_c) = (world.s_pc(), world.pv.v - world.cav.v, world.cav.v);
    match scenario {
        Scenario::A => vec![],
        Scenario::B => vec![s_pc, dv, v_c],
        Scenario::C => vec![s_pc, world.s_ch(), dv, v_c, world.hdv.v],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct RewardComponents {
    pub r_c: f64,
    pub r_h: f64,
    pub r_t: f64,
    pub r_s: f64,
    pub collision: f64,
}

impl RewardComponents {
    pub fn total(&self) -> f64 {
        self.r_c + self.r_h + self.r_t + self.r_s + self.collision
    }
}

fn clip(x: f64, band: f64) -> f64 {
    x.clamp(-band, band)
}

/// Traffic-efficiency term: penalize the gap when the time gap is at least the threshold.
pub fn traffic_reward(s_pc: f64, v_c: f64, cfg: &RewardConfig) -> f64 {
    let tg = if v_c > 0.0 { s_pc / v_c } else { f64::INFINITY };
    if tg >= cfg.tg_threshold {
        -cfg.alpha_t * s_pc
    } else {
        0.0
    }
}

/// Safety term `ln(TTC/window)` while closing in within the window, else 0.
pub fn safety_reward(s_pc: f64, dv_pc: f64, cfg: &RewardConfig) -> f64 {
    if dv_pc >= 0.0 {
        return 0.0;
    }
    let ttc = -s_pc / dv_pc;
    if ttc > 0.0 && ttc <= cfg.ttc_window {
        (ttc / cfg.ttc_window).ln()
    } else {
        0.0
    }
}

/// Reward terms for `world` when the CAV applies `u_c`; `a_h_hat` is the predicted HDV acceleration.
#[allow(clippy::too_many_arguments)]
pub fn reward_terms(
    world: &World,
    u_c: f64,
    a_h_hat: f64,
    scenario: Scenario,
    cfg: &RewardConfig,
    tau: f64,
    energy: &EnergyCoeffs,
) -> RewardComponents {
    if !scenario.has_cav() {
        return RewardComponents::default();
    }
    let r_c = clip(
        -cfg.alpha_c * power(world.cav.v, u_c, energy) * tau,
        cfg.energy_clip,
    );
    let r_h = if scenario == Scenario::C {
        clip(
            -cfg.alpha_h * power(world.hdv.v, a_h_hat, energy) * tau,
            cfg.energy_clip,
        )
    } else {
        0.0
    };
    let r_t = traffic_reward(world.s_pc(), world.cav.v, cfg);
    let r_s = safety_reward(world.s_pc(), world.pv.v - world.cav.v, cfg);
    RewardComponents {
        r_c,
        r_h,
        r_t,
        r_s,
        collision: 0.0,
    }
}

/// Reward with the HDV acceleration predicted from the current headway estimate.
#[allow(clippy::too_many_arguments)]
pub fn reward(
    world: &World,
    u_c: f64,
    est: &BehaviorEstimate,
    idm: &IdmParams,
    scenario: Scenario,
    cfg: &RewardConfig,
    tau: f64,
    energy: &EnergyCoeffs,
) -> Result<(f64, RewardComponents)> {
    let a_h_hat = estimated_hdv_accel(est, world.hdv.v, world.s_ch().max(1e-3), world.cav.v, idm)?;
    let c = reward_terms(world, u_c, a_h_hat, scenario, cfg, tau, energy);
    Ok((c.total(), c))
}

/// PV velocity trace sampled at the step length.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PvProfile {
    pub v: Vec<f64>,
}

impl PvProfile {
    pub fn constant(v: f64, len: usize) -> Self {
        Self { v: vec![v; len] }
    }

    /// Reads a `t,v` CSV; rows must be spaced by `tau`.
    pub fn from_csv(path: &Path, tau: f64) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(path)?;
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name);
        let (Some(it), Some(iv)) = (col("t"), col("v")) else {
            return Err(Error::Format(format!(
                "{}: expected header `t,v`",
                path.display()
            )));
        };
        let mut t_prev: Option<f64> = None;
        let mut v = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| {
                        Error::Format(format!(
                            "{}: bad value on data row {}",
                            path.display(),
                            line + 1
                        ))
                    })
            };
            let (t, vel) = (parse(it)?, parse(iv)?);
            if let Some(tp) = t_prev {
                if ((t - tp) - tau).abs() > 1e-6 {
                    return Err(Error::Format(format!(
                        "{}: time step {} differs from tau {tau}",
                        path.display(),
                        t - tp
                    )));
                }
            }
            if vel < 0.0 {
                return Err(Error::Format(format!(
                    "{}: negative velocity on data row {}",
                    path.display(),
                    line + 1
                )));
            }
            t_prev = Some(t);
            v.push(vel);
        }
        if v.len() < 2 {
            return Err(Error::Format(format!(
                "{}: profile needs at least two rows",
                path.display()
            )));
        }
        Ok(Self { v })
    }

    /// Smooth synthetic trace: three sinusoids and one smoothed ramp around `v0`,
    /// rate-limited to `|a| ≤ a_max` and floored at `v_min`.
    pub fn synthetic<R: Rng + ?Sized>(
        rng: &mut R,
        len: usize,
        tau: f64,
        v0: f64,
        a_max: f64,
        v_min: f64,
    ) -> Self {
        let mut terms = Vec::new();
        for _ in 0..3 {
            let amp: f64 = rng.random_range(0.5..2.0);
            let period: f64 = rng.random_range(15.0..60.0);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            terms.push((amp, period, phase));
        }
        let ramp_height: f64 = rng.random_range(-2.0..2.0);
        let ramp_start: f64 = rng.random_range(0.0..(len as f64 * tau * 0.7).max(1.0));
        let ramp_len: f64 = rng.random_range(10.0..30.0);
        let raw = |t: f64| {
            let waves: f64 = terms
                .iter()
                .map(|&(a, p, ph)| a * ((std::f64::consts::TAU * t / p + ph).sin() - ph.sin()))
                .sum();
            let u = ((t - ramp_start) / ramp_len).clamp(0.0, 1.0);
            v0 + waves + ramp_height * u * u * (3.0 - 2.0 * u)
        };
        let mut v = Vec::with_capacity(len);
        let mut prev = v0;
        for k in 0..len {
            let target = raw(k as f64 * tau).max(v_min);
            let next = if k == 0 {
                v0
            } else {
                prev + (target - prev).clamp(-a_max * tau, a_max * tau)
            };
            v.push(next);
            prev = next;
        }
        Self { v }
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    fn at(&self, k: usize) -> f64 {
        self.v[k.min(self.v.len() - 1)]
    }
}

/// How the CAV input is produced.
#[derive(Debug, Clone)]
pub enum CavControl {
    /// Proposal certified by the tube filter.
    Filtered(Box<SafetyFilter>),
    /// Proposal clipped to the input bounds and applied directly.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub scenario: Scenario,
    pub steps: usize,
    pub initial: InitialConditions,
    pub reward: RewardConfig,
    pub model: ModelParams,
    pub constraints: ConstraintSpec,
    pub disturbance: DisturbanceSpec,
    /// IDM parameters of the simulated HDV; `t` is overridden per episode.
    pub idm: IdmParams,
    pub estimator: EstimatorConfig,
    pub energy: EnergyCoeffs,
    /// A gap at or below this value counts as a collision.
    pub collision_gap: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::C,
            steps: 300,
            initial: InitialConditions::default(),
            reward: RewardConfig::default(),
            model: ModelParams::default(),
            constraints: ConstraintSpec::default(),
            disturbance: DisturbanceSpec::default(),
            idm: IdmParams::default(),
            estimator: EstimatorConfig::default(),
            energy: EnergyCoeffs::default(),
            collision_gap: 0.0,
        }
    }
}

/// Per-step information besides observation and reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepInfo {
    pub u_l: f64,
    pub u_c: f64,
    pub used_backup: bool,
    pub certification_failed: bool,
    pub violation: bool,
    pub collision: bool,
    /// Margin of `x − x̄₀` in the tube; `NaN` without a filter.
    pub tube_margin: f64,
    pub x: [f64; 2],
    pub xbar0: Option<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub components: RewardComponents,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeResult {
    pub scenario: Scenario,
    pub seed: u64,
    pub t_true: f64,
    pub t_hat: f64,
    pub steps: usize,
    pub v_p: Vec<f64>,
    pub v_c: Vec<f64>,
    pub v_h: Vec<f64>,
    pub a_p: Vec<f64>,
    pub a_c: Vec<f64>,
    pub a_h: Vec<f64>,
    pub u_l: Vec<f64>,
    pub gap_pc: Vec<f64>,
    pub gap_ch: Vec<f64>,
    pub x: Vec<[f64; 2]>,
    pub xbar0: Vec<Option<[f64; 2]>>,
    pub tube_margin: Vec<f64>,
    pub rewards: Vec<f64>,
    pub components: Vec<RewardComponents>,
    pub cav_energy: Option<TripEnergy>,
    pub hdv_energy: TripEnergy,
    pub holistic_kj_per_km: Option<f64>,
    pub violations: usize,
    pub collision: bool,
    pub qp_failures: usize,
    pub certification_failures: usize,
}

impl EpisodeResult {
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Smallest tube margin over the episode (`+∞` without filter steps).
    pub fn min_tube_margin(&self) -> f64 {
        self.tube_margin
            .iter()
            .copied()
            .filter(|m| !m.is_nan())
            .fold(f64::INFINITY, f64::min)
    }
}

/// One episode in progress.
#[derive(Debug, Clone)]
pub struct Env {
    cfg: EnvConfig,
    control: CavControl,
    profile: PvProfile,
    t_true: f64,
    seed: u64,
    world: World,
    est: BehaviorEstimate,
    pv_rng: Stream,
    hdv_rng: Stream,
    k: usize,
    done: bool,
    log: EpisodeResult,
}

impl Env {
    /// Starts an episode. Noise streams are derived from `seed` so that different
    /// controllers face the same traffic realization.
    pub fn new(
        cfg: EnvConfig,
        mut control: CavControl,
        profile: PvProfile,
        t_true: f64,
        seed: u64,
    ) -> Result<Self> {
        cfg.reward.validate()?;
        cfg.constraints.validate()?;
        cfg.disturbance.validate(&cfg.model)?;
        let idm = cfg.idm.with_headway(t_true);
        idm.validate()?;
        if profile.len() < 2 {
            return Err(Error::domain("PV profile needs at least two samples"));
        }
        if cfg.steps == 0 {
            return Err(Error::domain("episode length must be positive"));
        }
        if let CavControl::Filtered(f) = &mut control {
            f.reset();
        }
        let world = World::from_initial(&cfg.initial);
        let log = EpisodeResult {
            scenario: cfg.scenario,
            seed,
            t_true,
            t_hat: cfg.estimator.prior,
            steps: 0,
            v_p: vec![],
            v_c: vec![],
            v_h: vec![],
            a_p: vec![],
            a_c: vec![],
            a_h: vec![],
            u_l: vec![],
            gap_pc: vec![],
            gap_ch: vec![],
            x: vec![],
            xbar0: vec![],
            tube_margin: vec![],
            rewards: vec![],
            components: vec![],
            cav_energy: None,
            hdv_energy: TripEnergy {
                kj: 0.0,
                km: 0.0,
                kj_per_km: None,
            },
            holistic_kj_per_km: None,
            violations: 0,
            collision: false,
            qp_failures: 0,
            certification_failures: 0,
        };
        Ok(Self {
            est: BehaviorEstimate::new(cfg.estimator),
            pv_rng: rng::stream(seed, rng::PV_NOISE),
            hdv_rng: rng::stream(seed, rng::HDV_NOISE),
            cfg,
            control,
            profile,
            t_true,
            seed,
            world,
            k: 0,
            done: false,
            log,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn step_index(&self) -> usize {
        self.k
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn estimate(&self) -> &BehaviorEstimate {
        &self.est
    }

    pub fn observation(&self) -> Vec<f64> {
        observe(&self.world, self.cfg.scenario)
    }

    /// Takes back the filter (or raw marker) for reuse in the next episode.
    pub fn into_control(self) -> CavControl {
        self.control
    }

    /// Advances one step with the agent's proposal `u_l` (ignored in scenario A).
    pub fn step(&mut self, u_l: f64) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::domain("episode already finished"));
        }
        ensure_finite("agent action", &[u_l])?;
        let cfg = &self.cfg;
        let params = cfg.model;
        let tau = params.tau;
        let scenario = cfg.scenario;
        let w = self.world;

        // PV: acceleration toward the next profile sample, prediction with noise
        let mut d = sample_disturbances(&cfg.disturbance, &mut self.pv_rng);
        d.delta_a_h = truncated_normal(
            &mut self.hdv_rng,
            cfg.disturbance.sigma,
            cfg.disturbance.n_h,
        );
        let a_p =
            ((self.profile.at(self.k + 1) - w.pv.v) / tau).clamp(-PV_ACCEL_LIMIT, PV_ACCEL_LIMIT);
        let abar_p = a_p + d.delta_a_p;

        let x = compose_error_state(w.pv, w.cav, &params);
        let mut info = StepInfo {
            u_l,
            u_c: 0.0,
            used_backup: false,
            certification_failed: false,
            violation: false,
            collision: false,
            tube_margin: f64::NAN,
            x: [x.x1, x.x2],
            xbar0: None,
        };
        if scenario.has_cav() {
            info.u_c = match &mut self.control {
                CavControl::Raw => u_l.clamp(-cfg.constraints.u_min, cfg.constraints.u_max),
                CavControl::Filtered(filter) => {
                    let horizon = filter.config().horizon;
                    let n_hold = filter.config().n_hold;
                    let pred = predict_pv_profile(abar_p, horizon, n_hold);
                    match filter.certify(x, u_l, &pred) {
                        Ok(act) => {
                            info.used_backup = act.used_backup;
                            info.tube_margin = act.tube_margin;
                            info.xbar0 = Some(act.xbar0);
                            act.u_s
                        }
                        Err(Error::CertificationFailed(msg)) => {
                            log::warn!("step {}: {msg}; braking at the input bound", self.k);
                            info.certification_failed = true;
                            -cfg.constraints.u_min
                        }
                        Err(e) => return Err(e),
                    }
                }
            };
            let report = check_constraints(x, info.u_c, &cfg.constraints);
            info.violation = !report.satisfied_within(VIOLATION_TOL);
        }

        // HDV acceleration from the true IDM, predicted acceleration for the reward
        let idm_true = cfg.idm.with_headway(self.t_true);
        let hdv_gap = w.hdv_gap(scenario);
        let v_lead = w.hdv_leader_speed(scenario);
        let a_h = idm_accel(&idm_true, w.hdv.v, w.hdv.v - v_lead, hdv_gap.max(1e-3))?;
        let u_reward = if cfg.reward.use_applied_input {
            info.u_c
        } else {
            u_l
        };
        let (mut r, mut comp) = reward(
            &w,
            u_reward,
            &self.est,
            &cfg.idm,
            scenario,
            &cfg.reward,
            tau,
            &cfg.energy,
        )?;

        // transition
        let pv_next = step_vehicle(
            VehicleState::new(w.pv.s + d.delta_p[0], w.pv.v + d.delta_p[1]),
            a_p,
            &params,
        )?;
        let cav_next = if scenario.has_cav() {
            step_vehicle(w.cav, info.u_c, &params)?
        } else {
            w.cav
        };
        let hdv_next = step_hdv(w.hdv, a_h, d.delta_a_h, &params)?;
        let next = World {
            pv: pv_next,
            cav: cav_next,
            hdv: hdv_next,
        };

        let collision = if scenario.has_cav() {
            next.s_pc() <= cfg.collision_gap || next.s_ch() <= cfg.collision_gap
        } else {
            next.pv.s - next.hdv.s <= cfg.collision_gap
        };
        if collision && scenario.has_cav() {
            comp.collision = cfg.reward.collision_penalty;
            r += comp.collision;
        }
        info.collision = collision;

        if scenario.has_cav() {
            self.est.update(
                BehaviorSample {
                    v_h: w.hdv.v,
                    v_c: w.cav.v,
                    s_ch: w.s_ch(),
                },
                &cfg.idm,
                &params,
            );
        }

        let log = &mut self.log;
        log.v_p.push(w.pv.v);
        log.v_c.push(w.cav.v);
        log.v_h.push(w.hdv.v);
        log.a_p.push(a_p);
        log.a_c.push(info.u_c);
        log.a_h.push((hdv_next.v - w.hdv.v) / tau);
        log.u_l.push(u_l);
        log.gap_pc.push(w.s_pc());
        log.gap_ch.push(w.s_ch());
        log.x.push(info.x);
        log.xbar0.push(info.xbar0);
        log.tube_margin.push(info.tube_margin);
        log.rewards.push(r);
        log.components.push(comp);
        log.violations += usize::from(info.violation);
        log.qp_failures += usize::from(info.used_backup || info.certification_failed);
        log.certification_failures += usize::from(info.certification_failed);
        log.collision |= collision;
        log.steps += 1;

        self.world = next;
        self.k += 1;
        self.done = collision || self.k >= cfg.steps;
        Ok(StepOutcome {
            observation: self.observation(),
            reward: r,
            components: comp,
            done: self.done,
            info,
        })
    }

    /// Closes the episode and computes energies.
    pub fn finish(mut self) -> Result<(EpisodeResult, CavControl)> {
        let tau = self.cfg.model.tau;
        let log = &mut self.log;
        log.t_hat = self.est.t_hat;
        if log.steps > 0 {
            log.hdv_energy = trip_energy(&log.v_h, &log.a_h, tau, &self.cfg.energy)?;
            if self.cfg.scenario.has_cav() {
                let cav = trip_energy(&log.v_c, &log.a_c, tau, &self.cfg.energy)?;
                log.holistic_kj_per_km = holistic_kj_per_km(&cav, &log.hdv_energy);
                log.cav_energy = Some(cav);
            }
        }
        Ok((self.log, self.control))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Runs a whole episode with `policy` mapping observations to proposals.
pub fn run_episode<P>(
    cfg: &EnvConfig,
    control: CavControl,
    profile: PvProfile,
    t_true: f64,
    seed: u64,
    mut policy: P,
) -> Result<(EpisodeResult, CavControl)>
where
    P: FnMut(&[f64]) -> Result<f64>,
{
    let mut env = Env::new(cfg.clone(), control, profile, t_true, seed)?;
    while !env.is_done() {
        let obs = env.observation();
        let u_l = if cfg.scenario.has_cav() {
            policy(&obs)?
        } else {
            0.0
        };
        env.step(u_l)?;
    }
    env.finish()
}

/// Lumped disturbance realized by one PV step, for checks against `c_w`.
pub fn realized_disturbance(
    delta_p: Vector2<f64>,
    delta_a_p: f64,
    params: &ModelParams,
) -> Vector2<f64> {
    params.a() * delta_p - params.b() * delta_a_p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{build_config, RmpcWeights};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn filter(weights: RmpcWeights) -> CavControl {
        let cfg = build_config(
            &ConstraintSpec::default(),
            &DisturbanceSpec::default(),
            &ModelParams::default(),
            &weights,
        )
        .unwrap();
        CavControl::Filtered(Box::new(SafetyFilter::new(cfg).unwrap()))
    }

    #[test]
    fn observations_follow_initial_conditions() {
        let w = World::from_initial(&InitialConditions::default());
        let o = observe(&w, Scenario::C);
        let expect = [20.0, 20.0, 1.6416, 8.5, 8.0];
        assert!(
            o.iter().zip(expect).all(|(a, b)| close(*a, b, 1e-12)),
            "{o:?}"
        );
        let t = observe(
            &World::from_initial(&InitialConditions::test()),
            Scenario::C,
        );
        assert_eq!(t[0], 15.0);
        assert!(t[1..]
            .iter()
            .zip(&expect[1..])
            .all(|(a, b)| close(*a, *b, 1e-12)));
        let b = observe(&w, Scenario::B);
        assert_eq!(b.len(), 3);
        assert!(b
            .iter()
            .zip([20.0, 1.6416, 8.5])
            .all(|(a, e)| close(*a, e, 1e-12)));
    }

    #[test]
    fn reward_term_examples() {
        let cfg = RewardConfig::default();
        let c = EnergyCoeffs::default();
        let v: f64 = 8.5;
        let p = 110.3 + 422.9 * v - 0.0279 * v * v + 0.3557 * v * v * v;
        let mut w = World::from_initial(&InitialConditions::default());
        w.cav.v = v;
        let terms = reward_terms(&w, 0.0, 0.0, Scenario::C, &cfg, 0.5, &c);
        assert!(close(terms.r_c, -p * 0.5 / 30000.0, 1e-12));
        assert!(close(terms.r_c, -0.0654, 1e-4));

        assert!(close(safety_reward(15.0, -5.0, &cfg), 0.75f64.ln(), 1e-12));
        assert_eq!(safety_reward(20.0, -5.0, &cfg), 0.0);
        assert_eq!(safety_reward(15.0, 1.0, &cfg), 0.0);
        assert_eq!(traffic_reward(20.0, 8.0, &cfg), -0.8);
        assert_eq!(traffic_reward(19.9, 8.0, &cfg), 0.0);
        assert_eq!(traffic_reward(3.0, 0.0, &cfg), -3.0 / 25.0);
    }

    #[test]
    fn energy_terms_are_clipped() {
        let cfg = RewardConfig::default();
        let mut w = World::from_initial(&InitialConditions::default());
        w.cav.v = 25.0;
        w.hdv.v = 25.0;
        let t = reward_terms(
            &w,
            3.0,
            3.0,
            Scenario::C,
            &cfg,
            0.5,
            &EnergyCoeffs::default(),
        );
        assert_eq!(t.r_c, -1.0);
        assert_eq!(t.r_h, -1.0);
        let b = reward_terms(
            &w,
            3.0,
            3.0,
            Scenario::B,
            &cfg,
            0.5,
            &EnergyCoeffs::default(),
        );
        assert_eq!(b.r_h, 0.0);
    }

    fn quiet_config(scenario: Scenario, v: f64, s_pc: f64) -> EnvConfig {
        let idm = IdmParams::default().with_headway(1.5);
        let s_ch = (idm.s0 + idm.t * v) / (1.0 - (v / idm.v_d).powf(idm.delta0)).sqrt();
        EnvConfig {
            scenario,
            disturbance: DisturbanceSpec {
                c_w: 0.3,
                ..DisturbanceSpec::zero()
            },
            initial: InitialConditions {
                s_pc,
                s_ch,
                v_c: v,
                dv_pc: 0.0,
                v_h: v,
            },
            ..EnvConfig::default()
        }
    }

    #[test]
    fn equilibrium_is_preserved() {
        let v = 10.0;
        let s_pc = ModelParams::default().h * v;
        let cfg = quiet_config(Scenario::C, v, s_pc);
        for control in [
            CavControl::Raw,
            filter(RmpcWeights::default().with_horizon(20)),
        ] {
            let mut env =
                Env::new(cfg.clone(), control, PvProfile::constant(v, 400), 1.5, 3).unwrap();
            let start = *env.world();
            while !env.is_done() {
                let out = env.step(0.0).unwrap();
                assert_eq!(out.components.r_t, 0.0);
                assert_eq!(out.components.r_s, 0.0);
                assert!(close(
                    out.reward,
                    out.components.r_c + out.components.r_h,
                    1e-15
                ));
                assert!(out.info.u_c.abs() < 1e-6, "u_c = {}", out.info.u_c);
            }
            let end = env.world();
            assert!(close(end.s_pc(), start.s_pc(), 1e-4));
            assert!(close(end.s_ch(), start.s_ch(), 1e-4));
            assert!(close(end.cav.v, v, 1e-6) && close(end.hdv.v, v, 1e-6));
        }
    }

    fn braking_profile() -> PvProfile {
        let v: Vec<f64> = (0..400)
            .map(|k| {
                if k < 20 {
                    10.1416
                } else {
                    (10.1416 - 0.5 * (k - 20) as f64 * 0.5).max(6.0)
                }
            })
            .collect();
        PvProfile { v }
    }

    #[test]
    fn raw_acceleration_crashes_and_filter_prevents_it() {
        let cfg = EnvConfig {
            initial: InitialConditions::test(),
            ..EnvConfig::default()
        };
        let (raw, _) = run_episode(&cfg, CavControl::Raw, braking_profile(), 1.5, 11, |_| {
            Ok(3.0)
        })
        .unwrap();
        assert!(raw.collision);
        assert!(raw.steps < 300);
        let penalties = raw.components.iter().filter(|c| c.collision != 0.0).count();
        assert_eq!(penalties, 1);
        assert_eq!(raw.components.last().unwrap().collision, -500.0);

        let f = filter(RmpcWeights::default().with_horizon(20));
        let (safe, _) = run_episode(&cfg, f, braking_profile(), 1.5, 11, |_| Ok(3.0)).unwrap();
        assert!(!safe.collision);
        assert_eq!(safe.violations, 0);
        assert_eq!(safe.steps, 300);
        assert!(safe.min_tube_margin() >= -1e-7);
    }

    #[test]
    fn episodes_are_deterministic() {
        let cfg = EnvConfig {
            initial: InitialConditions::test(),
            ..EnvConfig::default()
        };
        let profile = PvProfile::synthetic(
            &mut ChaCha8Rng::seed_from_u64(5),
            301,
            0.5,
            10.1416,
            3.0,
            PROFILE_MIN_SPEED,
        );
        let run = || {
            let f = filter(RmpcWeights::default().with_horizon(20));
            run_episode(&cfg, f, profile.clone(), 2.0, 21, |o| {
                Ok(0.1 * (o[0] - 15.0).tanh())
            })
            .unwrap()
            .0
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.violations, 0);
        assert!(!a.collision);
        let comp = a
            .components
            .iter()
            .all(|c| c.r_c.abs() <= 1.0 && c.r_h.abs() <= 1.0 && c.r_s <= 0.0);
        assert!(comp);
        let cav = a.cav_energy.unwrap().kj_per_km.unwrap();
        let hdv = a.hdv_energy.kj_per_km.unwrap();
        assert!(close(a.holistic_kj_per_km.unwrap(), cav + hdv, 1e-9));
    }

    #[test]
    fn scenario_a_has_no_cav() {
        let cfg = EnvConfig {
            scenario: Scenario::A,
            ..EnvConfig::default()
        };
        let profile = PvProfile::constant(10.0, 301);
        let (r, _) = run_episode(&cfg, CavControl::Raw, profile, 1.2, 4, |_| {
            panic!("no agent in scenario A")
        })
        .unwrap();
        assert!(r.cav_energy.is_none());
        assert!(r.holistic_kj_per_km.is_none());
        assert!(r.hdv_energy.kj_per_km.unwrap() > 0.0);
        assert!(r.rewards.iter().all(|&x| x == 0.0));
        assert_eq!(r.steps, 300);
    }

    #[test]
    fn synthetic_profile_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let p = PvProfile::synthetic(&mut rng, 301, 0.5, 10.1416, 3.0, PROFILE_MIN_SPEED);
            assert_eq!(p.v[0], 10.1416);
            assert!(p.v.iter().all(|&v| v >= PROFILE_MIN_SPEED - 1e-12));
            assert!(p.v.windows(2).all(|w| (w[1] - w[0]).abs() <= 1.5 + 1e-12));
        }
    }

    #[test]
    fn csv_profile_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pv.csv");
        std::fs::write(&path, "t,v\n0,10\n0.5,10.5\n1.0,11\n").unwrap();
        let p = PvProfile::from_csv(&path, 0.5).unwrap();
        assert_eq!(p.v, vec![10.0, 10.5, 11.0]);
        std::fs::write(&path, "t,v\n0,10\n0.7,10.5\n").unwrap();
        assert!(matches!(
            PvProfile::from_csv(&path, 0.5),
            Err(Error::Format(_))
        ));
        std::fs::write(&path, "time,speed\n0,10\n").unwrap();
        assert!(matches!(
            PvProfile::from_csv(&path, 0.5),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn scenario_parsing() {
        assert_eq!("b".parse::<Scenario>().unwrap(), Scenario::B);
        assert!("D".parse::<Scenario>().is_err());
        assert_eq!(
            Scenario::C.observation_scale().len(),
            Scenario::C.state_dim()
        );
    }
}
